#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "trajeglish/geometry.hpp"
#include "trajeglish/scenario.hpp"

namespace trajeglish {

// Agent-major state grid: grid[i][t].
using StateGrid = std::vector<std::vector<AgentState>>;

StateGrid state_grid(const Scenario& sc);
std::vector<AgentMeta> metas_of(const Scenario& sc);

struct AdeResult {
  std::vector<double> per_agent;  // NaN where an agent has no overlapping valid step
  double aggregate = 0.0;         // mean over all overlapping valid (agent, t) pairs
};

// Mean L2 center distance over timesteps where both tracks are valid.
double ade(std::span<const AgentState> a, std::span<const AgentState> b);
AdeResult ade(const StateGrid& a, const StateGrid& b);

// Mean corner distance over agents and jointly valid timesteps.
double scenario_distance(const StateGrid& rollout, const StateGrid& log, std::span<const AgentMeta> metas);
double min_scenario_distance(std::span<const StateGrid> rollouts, const StateGrid& log,
                             std::span<const AgentMeta> metas);

struct CollisionCurve {
  std::vector<double> per_step;                                  // fraction of valid agents in overlap
  std::array<std::vector<double>, kNumAgentClasses> class_step;  // same, per class (NaN if none valid)
  std::vector<std::size_t> pair_count;                           // overlapping pairs per step
  double aggregate = 0.0;                                        // agents with any overlap / agents
  std::array<double, kNumAgentClasses> class_aggregate{};
  std::array<std::size_t, kNumAgentClasses> class_agents{};
};

CollisionCurve collision_rate(const StateGrid& states, std::span<const AgentMeta> metas);

struct TokenFrequency {
  // Per-class normalized histogram over token ids, and the same values sorted descending.
  std::array<std::vector<double>, kNumAgentClasses> histogram;
  std::array<std::vector<double>, kNumAgentClasses> sorted;
  std::array<std::size_t, kNumAgentClasses> counts{};
};

// tokens[i] holds the token ids of agent i; invalid ids are skipped.
TokenFrequency token_frequency(std::span<const std::vector<int>> tokens, std::span<const AgentClass> classes,
                               std::size_t vocab_size);
double total_variation(std::span<const double> p, std::span<const double> q);

/// Named scalars and curves with units; serialized as JSON and flat CSV.
class MetricReport {
 public:
  struct Curve {
    std::string unit;
    std::string x_label;
    std::vector<double> x;
    std::vector<double> y;
  };

  void scalar(const std::string& name, double value, const std::string& unit = "");
  void curve(const std::string& name, Curve c);

  const std::map<std::string, std::pair<double, std::string>>& scalars() const { return scalars_; }
  const std::map<std::string, Curve>& curves() const { return curves_; }
  double get(const std::string& name) const;
  const Curve& get_curve(const std::string& name) const;

  std::string to_json() const;
  std::string to_csv() const;  // name,unit,x_label,x,y rows; scalars have empty x
  void save(const std::filesystem::path& json_path) const;

 private:
  std::map<std::string, std::pair<double, std::string>> scalars_;
  std::map<std::string, Curve> curves_;
};

}  // namespace trajeglish
