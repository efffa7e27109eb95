#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trajeglish/evaluation.hpp"
#include "trajeglish/metrics.hpp"
#include "trajeglish/model.hpp"
#include "trajeglish/rollout.hpp"
#include "trajeglish/synthetic.hpp"
#include "trajeglish/training.hpp"

namespace trajeglish {

nlohmann::json synth_config_to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct DataSection {
  SynthConfig synth;
  std::string corpus;  // existing scenario file; empty = generate synthetically
  double val_fraction = 0.15;
  std::uint64_t split_seed = 0;
};

struct VocabSection {
  VocabMethod method = VocabMethod::kKDisks;
  std::size_t size = 384;  // nominal size; grids use grid_xyh_counts / grid_xy_count
  double epsilon = 0.035;
  std::uint64_t seed = 0;
  std::size_t restarts = 16;
  bool compare = true;  // also fit the other three methods for the error table
};

struct RolloutSection {
  RolloutConfig config;
  std::size_t t0 = 0;
  std::size_t max_scenarios = 0;  // 0 = every validation scenario
  Controller control = Controller::kModel;  // kModel: full control; kReplay: all agents replayed
  bool sdc_replay = false;                  // partial control: the SDC follows its log
};

struct EvalSection {
  int n_steps = 0;
  std::vector<int> contexts;
  std::size_t max_examples = 0;
  bool nll = true;
  bool rollouts = true;
};

/// Fully resolved experiment document.
struct ExperimentConfig {
  std::filesystem::path run_dir = "runs/default";
  std::string name;  // model name; empty = derived from regime and noise
  std::size_t workers = 0;  // 0 = TRAJEGLISH_WORKERS or hardware concurrency
  DataSection data;
  VocabSection vocab;
  ModelConfig model;
  TrainConfig train;
  RolloutSection rollout;
  EvalSection eval;

  std::string model_name() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// Reads a config document; a "base" key names a file (relative to this one)
// whose content is merged underneath.
nlohmann::json load_config_document(const std::filesystem::path& path);
// Sets a dotted key; the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

/// Artifact locations under a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path train_corpus() const { return root / "data" / "train.jsonl"; }
  std::filesystem::path val_corpus() const { return root / "data" / "val.jsonl"; }
  std::filesystem::path census() const { return root / "data" / "census.json"; }
  std::filesystem::path templates() const { return root / "vocab" / "templates.json"; }
  std::filesystem::path fit_report() const { return root / "vocab" / "fit_report.csv"; }
  std::filesystem::path token_grids(const std::string& split) const { return root / "tokens" / (split + ".jsonl"); }
  std::filesystem::path discretization() const { return root / "tokens" / "discretization.json"; }
  std::filesystem::path token_frequency() const { return root / "tokens" / "token_frequency.json"; }
  std::filesystem::path checkpoint(const std::string& name) const { return root / "models" / name / "checkpoint.tgck"; }
  std::filesystem::path train_log(const std::string& name) const { return root / "models" / name / "train_log.jsonl"; }
  std::filesystem::path rollouts(const std::string& name) const { return root / "rollouts" / name / "rollouts.jsonl"; }
  std::filesystem::path metrics(const std::string& name) const { return root / "eval" / name / "metrics.json"; }
  std::filesystem::path summary() const { return root / "eval" / "summary.csv"; }
  std::filesystem::path config_echo(const std::string& stage) const { return root / "configs" / (stage + ".json"); }
};

// Throws DataError naming the subcommand that produces `path` when it is missing.
void require_artifact(const std::filesystem::path& path, const std::string& producer);

// Fits one vocabulary from transitions as configured (method, size, epsilon, seed).
TemplateSet fit_vocabulary(const VocabSection& v, std::span<const Transition> transitions, std::size_t workers);

// One-step and chain-tokenized error of every method at the configured size, on a held-out corpus.
std::string fit_comparison_csv(const VocabSection& v, std::span<const Transition> fit_on, const Corpus& held_out,
                               std::size_t workers);

// Throws DataError when the corpus has a class the vocabulary was not fit on.
void check_vocab_classes(const TemplateSet& ts, const Corpus& corpus);

/// A rollout read back from a rollouts file.
struct RolloutRecord {
  std::string scenario;
  std::size_t index = 0;  // position among the scenario's rollouts
  std::size_t t0 = 0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> agent_ids;
  TokenGrid tokens;
  StateGrid states;
  std::vector<std::vector<double>> log_probs;
  double total_log_prob = 0.0;
};

std::vector<RolloutRecord> read_rollouts_jsonl(const std::filesystem::path& path);

// Collision, distance-to-log and per-seed metrics of rollouts against their scenarios.
MetricReport rollout_metrics(const std::vector<RolloutRecord>& records, const Corpus& scenarios);

// Subcommands. Each writes its outputs and a resolved-config echo under run_dir.
void cmd_generate(const ExperimentConfig& cfg);
void cmd_fit_vocab(const ExperimentConfig& cfg);
void cmd_tokenize(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_rollout(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg);
// Collects every eval/<name>/metrics.json into one CSV row per model.
void cmd_summarize(const ExperimentConfig& cfg);

}  // namespace trajeglish
