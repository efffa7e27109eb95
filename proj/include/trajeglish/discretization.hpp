#pragma once

#include <array>
#include <vector>

#include "trajeglish/metrics.hpp"
#include "trajeglish/tokenizer.hpp"

namespace trajeglish {

// Chain tokenization of every agent in a scenario.
std::vector<TokenizedTrajectory> tokenize_scenario(const Scenario& sc, const TemplateSet& ts);
StateGrid snapped_grid(std::span<const TokenizedTrajectory> chains);

struct DiscretizationReport {
  // Mean corner distance between raw and snapped states against the number of
  // steps since the chain anchor (index 0 is the anchor itself).
  std::vector<double> error_curve;
  std::array<std::vector<double>, kNumAgentClasses> class_error_curve;
  // Mean over all tokenized (non-anchor) steps.
  double mean_error = 0.0;
  std::array<double, kNumAgentClasses> class_mean_error{};
  std::size_t tokenized_steps = 0;
  // Fraction of valid agents in overlap at each timestep, pooled over scenarios.
  std::vector<double> collision_raw;
  std::vector<double> collision_tokenized;
  double max_collision_gap = 0.0;  // max |tokenized - raw| over timesteps

  MetricReport to_report(double tick) const;
};

DiscretizationReport discretization_report(const Corpus& corpus, const TemplateSet& ts, std::size_t workers = 1);

}  // namespace trajeglish
