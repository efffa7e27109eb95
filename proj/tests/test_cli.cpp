#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "trajeglish/discretization.hpp"
#include "trajeglish/error.hpp"
#include "trajeglish/experiment.hpp"

using namespace trajeglish;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_config(const fs::path& run_dir, const json& patch = json::object()) {
  json doc = json::parse(R"({
    "data": {"synth": {"n_scenarios": 24, "agents_per_scene": 4, "horizon": 12, "seed": 5}, "val_fraction": 0.3},
    "vocab": {"method": "kdisks", "size": 64, "epsilon": 0.03, "restarts": 2, "compare": false},
    "model": {"hidden_dim": 8, "n_heads": 1, "n_map_layers": 1, "n_enc_layers": 1, "n_dec_layers": 1,
              "max_agents": 4, "max_timesteps": 8, "n_latent_queries": 2, "mlp_ratio": 2},
    "train": {"steps": 4, "batch_size": 2, "optim": {"lr": 0.001, "warmup_steps": 1}},
    "rollout": {"config": {"horizon": 8, "n_rollouts": 2, "seed": 9}, "max_scenarios": 3},
    "eval": {"n_steps": 6, "contexts": [0, 3], "max_examples": 4},
    "workers": 1
  })");
  doc["run_dir"] = run_dir.string();
  doc.merge_patch(patch);
  return ExperimentConfig::from_json(doc);
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "trajeglish_test_cli_pipeline";
    fs::remove_all(dir_);
    const auto cfg = tiny_config(dir_);
    cmd_generate(cfg);
    cmd_fit_vocab(cfg);
    cmd_tokenize(cfg);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static fs::path dir_;
};

fs::path Pipeline::dir_;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TRAJEGLISH_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, OverrideParsesJsonOrString) {
  json doc = json::object();
  apply_override(doc, "train.steps", "12");
  apply_override(doc, "model.regime", "marginal");
  apply_override(doc, "eval.contexts", "[1,2]");
  apply_override(doc, "vocab.compare", "false");
  EXPECT_EQ(doc["train"]["steps"], 12);
  EXPECT_EQ(doc["model"]["regime"], "marginal");
  EXPECT_EQ(doc["eval"]["contexts"], json::array({1, 2}));
  EXPECT_EQ(doc["vocab"]["compare"], false);
  EXPECT_THROW(apply_override(doc, "train..steps", "1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "train.steps.x", "1"), ConfigError);
}

TEST(Config, BaseDocumentsMergeUnderneath) {
  const fs::path d = fs::temp_directory_path() / "trajeglish_test_cli_base";
  fs::create_directories(d / "sub");
  std::ofstream(d / "base.json") << R"({"run_dir": "a", "train": {"steps": 7, "batch_size": 3}})";
  std::ofstream(d / "sub" / "leaf.json") << R"({"base": "../base.json", "train": {"steps": 9}})";
  const json doc = load_config_document(d / "sub" / "leaf.json");
  EXPECT_EQ(doc["run_dir"], "a");
  EXPECT_EQ(doc["train"]["steps"], 9);
  EXPECT_EQ(doc["train"]["batch_size"], 3);
  EXPECT_FALSE(doc.contains("base"));
  EXPECT_THROW(load_config_document(d / "missing.json"), ConfigError);
  fs::remove_all(d);
}

TEST(Config, RoundTripAndStrictKeys) {
  const auto cfg = tiny_config("runs/x", json{{"model", {{"regime", "no_intra"}}}});
  EXPECT_EQ(cfg.model_name(), "no_intra");
  const auto again = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(again.to_json(), cfg.to_json());
  EXPECT_THROW(tiny_config("r", json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(tiny_config("r", json{{"train", {{"steps", "many"}}}}), ConfigError);
  EXPECT_THROW(tiny_config("r", json{{"data", {{"val_fraction", 1.5}}}}), ConfigError);
  EXPECT_THROW(tiny_config("r", json{{"rollout", {{"control", "external"}}}}), ConfigError);
  const auto noisy = tiny_config("r", json{{"train", {{"examples", {{"noisy", {{"enabled", true}}}}}}}});
  EXPECT_EQ(noisy.model_name(), "full_intra_noisy");
}

TEST(Config, VocabClassMismatch) {
  TemplateSet ts({{1, 0, 0}, {2, 0, 0}}, VocabMethod::kKMeans);
  FitStats s;
  s.class_count = {10, 0, 0};
  ts.set_fit_stats(s);
  SynthConfig sc;
  sc.n_scenarios = 6;
  sc.mix = {0, 0, 0, 1, 0, 0};  // pedestrian clusters only
  EXPECT_THROW(check_vocab_classes(ts, generate_synthetic(sc)), DataError);
  s.class_count = {10, 10, 10};
  ts.set_fit_stats(s);
  EXPECT_NO_THROW(check_vocab_classes(ts, generate_synthetic(sc)));
}

TEST_F(Pipeline, FitVocabIsSeparatedAndReproducible) {
  const RunLayout run{dir_};
  const TemplateSet ts = TemplateSet::load(run.templates());
  EXPECT_EQ(ts.size(), 64u);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t j = i + 1; j < ts.size(); ++j) {
      EXPECT_GT(corner_distance(ts[i].as_state(), ts[j].as_state(), AgentMeta::unit_box()), 0.03);
    }
  }
  const std::string first = slurp(run.templates());
  cmd_fit_vocab(tiny_config(dir_));
  EXPECT_EQ(slurp(run.templates()), first);
}

TEST_F(Pipeline, GridXyhEmitsProductSize) {
  const fs::path d = dir_ / "grid";
  fs::create_directories(d / "data");
  fs::copy(RunLayout{dir_}.train_corpus(), RunLayout{d}.train_corpus());
  fs::copy(RunLayout{dir_}.val_corpus(), RunLayout{d}.val_corpus());
  cmd_fit_vocab(tiny_config(d, json{{"vocab", {{"method", "grid_xyh"}, {"size", 384}}}}));
  EXPECT_EQ(TemplateSet::load(RunLayout{d}.templates()).size(), 448u);
}

TEST_F(Pipeline, TokenizeReportMatchesLibrary) {
  const RunLayout run{dir_};
  const TemplateSet ts = TemplateSet::load(run.templates());
  Corpus all = read_scenarios(run.train_corpus());
  const Corpus val = read_scenarios(run.val_corpus());
  all.insert(all.end(), val.begin(), val.end());
  const auto direct = discretization_report(all, ts).to_report(all.front().tick);
  EXPECT_EQ(slurp(run.discretization()), direct.to_json() + "\n");
  const auto& curve = direct.get_curve("error_vs_length");
  EXPECT_EQ(curve.x.size(), all.front().num_steps());
}

TEST_F(Pipeline, ReplayAllReproducesChainTokenizedLogs) {
  const auto cfg = tiny_config(dir_, json{{"name", "replay"}, {"rollout", {{"control", "replay"}}}});
  cmd_train(cfg);
  cmd_rollout(cfg);
  const RunLayout run{dir_};
  const TemplateSet ts = TemplateSet::load(run.templates());
  const Corpus val = read_scenarios(run.val_corpus());
  const auto records = read_rollouts_jsonl(run.rollouts("replay"));
  ASSERT_EQ(records.size(), 6u);
  std::size_t compared = 0;
  for (const auto& r : records) {
    const Scenario* sc = nullptr;
    for (const auto& s : val) {
      if (s.id == r.scenario) sc = &s;
    }
    ASSERT_NE(sc, nullptr);
    const auto chains = tokenize_scenario(*sc, ts);
    for (std::size_t a = 0; a < r.agent_ids.size(); ++a) {
      std::size_t idx = 0;
      while (sc->agents[idx].id != r.agent_ids[a]) ++idx;
      for (std::size_t k = 0; k < r.states[a].size(); ++k) {
        const auto& want = chains[idx].snapped_states[r.t0 + k];
        if (!want.valid) continue;
        ASSERT_TRUE(r.states[a][k].valid);
        EXPECT_EQ(r.states[a][k].x, want.x);
        EXPECT_EQ(r.states[a][k].y, want.y);
        EXPECT_EQ(r.states[a][k].h, want.h);
        ++compared;
      }
    }
  }
  EXPECT_GT(compared, 50u);
}

TEST_F(Pipeline, MarginalIntraOrderSweepIsFlat) {
  const auto cfg = tiny_config(dir_, json{{"model", {{"regime", "marginal"}}}, {"eval", {{"rollouts", false}}}});
  cmd_train(cfg);
  cmd_eval(cfg);
  const RunLayout run{dir_};
  const json metrics = json::parse(slurp(run.metrics("marginal")));
  const auto& y = metrics["curves"]["nll_predecessors"]["y"];
  ASSERT_GE(y.size(), 2u);
  for (const auto& v : y) EXPECT_NEAR(v.get<double>(), y[0].get<double>(), 1e-6);
}

TEST_F(Pipeline, StagesAreIdempotent) {
  const auto cfg = tiny_config(dir_, json{{"name", "idem"}});
  cmd_train(cfg);
  cmd_rollout(cfg);
  cmd_eval(cfg);
  const RunLayout run{dir_};
  const std::string ck = slurp(run.checkpoint("idem")), log = slurp(run.train_log("idem"));
  const std::string ro = slurp(run.rollouts("idem")), me = slurp(run.metrics("idem"));
  cmd_train(cfg);
  cmd_rollout(cfg);
  cmd_eval(cfg);
  EXPECT_EQ(slurp(run.checkpoint("idem")), ck);
  EXPECT_EQ(slurp(run.train_log("idem")), log);
  EXPECT_EQ(slurp(run.rollouts("idem")), ro);
  EXPECT_EQ(slurp(run.metrics("idem")), me);
  const json echo = json::parse(slurp(run.config_echo("train-idem")));
  EXPECT_EQ(ExperimentConfig::from_json(echo).to_json(), cfg.to_json());
}

TEST_F(Pipeline, EvalMetricsMatchRolloutFile) {
  const auto cfg = tiny_config(dir_, json{{"name", "metrics"}, {"eval", {{"nll", false}}}});
  cmd_train(cfg);
  cmd_rollout(cfg);
  cmd_eval(cfg);
  const RunLayout run{dir_};
  const json metrics = json::parse(slurp(run.metrics("metrics")));
  const auto direct = rollout_metrics(read_rollouts_jsonl(run.rollouts("metrics")), read_scenarios(run.val_corpus()));
  EXPECT_EQ(metrics.dump(), json::parse(direct.to_json()).dump());
  EXPECT_EQ(metrics["curves"]["collision_by_seed"]["x"].size(), 2u);
  EXPECT_EQ(metrics["scalars"]["rollouts"]["value"], 6.0);
}

TEST_F(Pipeline, MissingArtifactsNameTheProducer) {
  const fs::path empty = dir_ / "empty";
  const auto cfg = tiny_config(empty);
  try {
    cmd_fit_vocab(cfg);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("trajeglish generate"), std::string::npos);
  }
  try {
    cmd_rollout(tiny_config(dir_, json{{"name", "never_trained"}}));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("trajeglish train"), std::string::npos);
  }
}

TEST(Cli, ExitCodes) {
  const fs::path d = fs::temp_directory_path() / "trajeglish_test_cli_exit";
  fs::remove_all(d);
  fs::create_directories(d);
  const auto cfg_path = d / "c.json";
  json doc = tiny_config(d / "run").to_json();
  std::ofstream(cfg_path) << doc.dump();
  const std::string c = "--config " + cfg_path.string();
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train"), 2);
  EXPECT_EQ(run_cli("train --help"), 0);
  EXPECT_EQ(run_cli("train --config " + (d / "none.json").string()), 2);
  EXPECT_EQ(run_cli("train " + c + " --model.bogus 1"), 2);
  EXPECT_EQ(run_cli("train " + c + " stray"), 2);
  EXPECT_EQ(run_cli("train " + c), 3);
  EXPECT_EQ(run_cli("generate " + c + " --data.synth.n_scenarios=12"), 0);
  EXPECT_TRUE(fs::exists(RunLayout{d / "run"}.config_echo("generate")));
  const json echo = json::parse(slurp(RunLayout{d / "run"}.config_echo("generate")));
  EXPECT_EQ(echo["data"]["synth"]["n_scenarios"], 12);
  EXPECT_EQ(run_cli("fit-vocab " + c + " --vocab.epsilon 0.5"), 3);  // k-disks exhausts the pool
  EXPECT_EQ(run_cli("fit-vocab " + c), 0);
  EXPECT_EQ(run_cli("train " + c + " --train.optim.lr 1e200 --train.optim.clip_norm 0"), 4);
  fs::remove_all(d);
}
