#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "trajeglish/model.hpp"
#include "trajeglish/nn/optim.hpp"
#include "trajeglish/scenario.hpp"
#include "trajeglish/tokenizer.hpp"

namespace trajeglish {

/// A corpus with every track chain-tokenized once up front.
class TokenizedCorpus {
 public:
  TokenizedCorpus(Corpus corpus, TemplateSet templates, std::size_t workers = 1);

  const Corpus& scenarios() const { return corpus_; }
  const TemplateSet& templates() const { return templates_; }
  const std::vector<TokenizedTrajectory>& chains(std::size_t scenario) const { return chains_[scenario]; }
  std::size_t size() const { return corpus_.size(); }

 private:
  Corpus corpus_;
  TemplateSet templates_;
  std::vector<std::vector<TokenizedTrajectory>> chains_;
};

struct NoisyInputConfig {
  bool enabled = false;
  double sigma = 0.008;
  double p_top = 0.95;
};

struct ExampleOptions {
  int n_steps = 0;  // decoding steps per example; 0 = the model's max_timesteps
  bool random_crop = true;
  bool random_frame = true;
  bool random_order = true;
  NoisyInputConfig noisy;
};

/// One decoder sequence cut from a scenario.
struct TrainingExample {
  SceneInit init;
  TokenGrid inputs;   // equal to targets unless noisy inputs are enabled
  TokenGrid targets;
  std::size_t scenario = 0;
  std::size_t t0 = 0;                // scenario step of the initial state
  std::vector<std::size_t> agents;   // scenario agent index per slot
  std::size_t frame_agent = 0;       // scenario agent whose t0 pose defines the frame
};

// Agents valid at t0, nearest `max_agents` to `center` (center included),
// returned center first then by distance.
std::vector<std::size_t> nearest_agents(const Scenario& sc, std::size_t t0, std::size_t center,
                                        std::size_t max_agents);

// Builds an example window [t0, t0 + T]. Without random augmentation the
// window starts at 0, the frame is the SDC and the order is SDC then by
// distance. Returns nullopt when no agent is valid at t0 or no target is valid.
std::optional<TrainingExample> make_example(const TokenizedCorpus& data, std::size_t scenario,
                                            const ModelConfig& cfg, const ExampleOptions& opts, Rng& rng);

// Same, at a caller-chosen window start, frame agent and agent order.
std::optional<TrainingExample> make_example_at(const TokenizedCorpus& data, std::size_t scenario, std::size_t t0,
                                               int n_steps, std::size_t frame_agent,
                                               const std::vector<std::size_t>& order, const ModelConfig& cfg,
                                               const NoisyInputConfig& noisy, Rng& rng);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  nn::AdamWConfig optim;
  ExampleOptions examples;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t log_every = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t tokens_seen = 0;
  double grad_norm = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::size_t tokens_seen = 0;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

// Optimizes `model` in place. Each example's gradient is computed independently
// and summed in example order, so results do not depend on the worker count.
// Throws NumericError on a non-finite loss or gradient.
TrainResult train(Model& model, const TokenizedCorpus& data, const TrainConfig& cfg,
                  const TrainCallback& on_step = {});

// Appends one JSON object per entry.
void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogEntry>& log);

// Fraction of valid targets whose argmax logit equals the target, teacher-forced.
double teacher_forced_accuracy(const Model& model, const std::vector<TrainingExample>& examples);

}  // namespace trajeglish
