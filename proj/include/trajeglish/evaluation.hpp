#pragma once

#include <array>
#include <vector>

#include "trajeglish/metrics.hpp"
#include "trajeglish/model.hpp"
#include "trajeglish/training.hpp"

namespace trajeglish {

struct NllEvalOptions {
  int n_steps = 0;                // window length; 0 = the model's max_timesteps
  int context_limit = -1;         // >= 0: score only the window's last step with this many prior steps
  int intra_order_position = -1;  // >= 0: move each agent to this slot and score only that agent
  std::size_t max_examples = 0;   // 0 = every scenario
  std::size_t workers = 1;
};

/// Mean token NLL (nats) and its strata.
struct NllTable {
  double mean = 0.0;
  std::size_t tokens = 0;
  std::array<double, kNumAgentClasses> class_mean{};
  std::array<std::size_t, kNumAgentClasses> class_tokens{};
  // Indexed by decoding step within the window, i.e. own-history length.
  std::vector<double> by_step;
  std::vector<std::size_t> by_step_count;
  // Indexed by slot in the intra-timestep order (number of same-step predecessors).
  std::vector<double> by_predecessors;
  std::vector<std::size_t> by_predecessors_count;
  std::array<std::vector<double>, kNumAgentClasses> class_by_predecessors;
  std::array<std::vector<std::size_t>, kNumAgentClasses> class_by_predecessors_count;
};

// Deterministic evaluation windows: start 0, SDC frame, SDC-first distance order.
std::vector<TrainingExample> eval_examples(const TokenizedCorpus& data, const ModelConfig& cfg, int n_steps,
                                           std::size_t max_examples = 0);

NllTable nll_eval(const Model& model, const TokenizedCorpus& data, const NllEvalOptions& opts);

struct NllSweepOptions {
  int n_steps = 0;
  std::vector<int> contexts;  // empty = 0..n_steps-1
  std::size_t max_examples = 0;
  std::size_t workers = 1;
};

// Context-length and predecessor-count sweeps. Curves:
//   nll_context_delta[_<class>]: NLL(c) - NLL(full context), x = context steps
//   nll_predecessors[_<class>]:  NLL with the scored agent at slot k, x = k
// Scalars: nll, nll_<class>, nll_full_context.
MetricReport nll_sweeps(const Model& model, const TokenizedCorpus& data, const NllSweepOptions& opts);

}  // namespace trajeglish
