// trajeglish <subcommand> --config <file> [--key value]...

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trajeglish/error.hpp"
#include "trajeglish/experiment.hpp"

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Options {
  std::string config;
  std::size_t workers = 0;
  std::string name;
  bool replay_all = false;
};

// Turns leftover "--a.b value" / "--a.b=value" arguments into (key, value) pairs.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const std::string& arg = rest[i];
    if (arg.rfind("--", 0) != 0 || arg.size() <= 2) {
      throw trajeglish::ConfigError("unexpected argument '" + arg + "' (overrides are --key value)");
    }
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= rest.size()) throw trajeglish::ConfigError("override '" + arg + "' has no value");
      out.emplace_back(body, rest[++i]);
    }
  }
  return out;
}

trajeglish::ExperimentConfig resolve(const Options& opts, const std::vector<std::string>& rest) {
  nlohmann::json doc = trajeglish::load_config_document(opts.config);
  for (const auto& [k, v] : parse_overrides(rest)) trajeglish::apply_override(doc, k, v);
  if (opts.workers > 0) doc["workers"] = opts.workers;
  if (!opts.name.empty()) doc["name"] = opts.name;
  if (opts.replay_all) doc["rollout"]["control"] = "replay";
  return trajeglish::ExperimentConfig::from_json(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tokenized multi-agent traffic modeling: vocabulary fitting, training, rollouts and evaluation."};
  app.require_subcommand(1);
  Options opts;

  using Stage = std::function<void(const trajeglish::ExperimentConfig&)>;
  const std::vector<std::tuple<std::string, std::string, Stage>> stages{
      {"generate", "Generate (or import) a corpus and split it into train/val", trajeglish::cmd_generate},
      {"fit-vocab", "Fit the action vocabulary and write the method comparison", trajeglish::cmd_fit_vocab},
      {"tokenize", "Chain-tokenize both splits and write discretization reports", trajeglish::cmd_tokenize},
      {"train", "Train one model", trajeglish::cmd_train},
      {"rollout", "Sample rollouts on validation scenarios", trajeglish::cmd_rollout},
      {"eval", "Score held-out NLL and rollout metrics", trajeglish::cmd_eval},
      {"summarize", "Collect every model's metrics into one CSV", trajeglish::cmd_summarize},
  };
  std::map<CLI::App*, Stage> dispatch;
  for (const auto& [name, help, fn] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "Experiment config file (JSON)")->required();
    sub->add_option("--workers", opts.workers, "Worker threads (default: TRAJEGLISH_WORKERS or all cores)");
    sub->add_option("--name", opts.name, "Model name (default: regime, plus _noisy with noisy inputs)");
    if (name == "rollout") sub->add_flag("--replay-all", opts.replay_all, "Replay every agent from its log");
    sub->allow_extras();
    dispatch[sub] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    for (const auto& [sub, fn] : dispatch) {
      if (sub->parsed()) {
        const auto cfg = resolve(opts, sub->remaining());
        fn(cfg);
      }
    }
  } catch (const trajeglish::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const trajeglish::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const trajeglish::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
