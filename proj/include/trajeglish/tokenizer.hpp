#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trajeglish/geometry.hpp"
#include "trajeglish/random.hpp"
#include "trajeglish/scenario.hpp"

namespace trajeglish {

inline constexpr int kInvalidToken = -1;

/// A state delta (dx, dy, dh) in the local frame of the previous state.
struct Template {
  double dx = 0.0;
  double dy = 0.0;
  double dh = 0.0;

  AgentState as_state() const { return {dx, dy, dh, true}; }
  friend bool operator==(const Template&, const Template&) = default;
};

enum class VocabMethod : std::uint8_t { kKDisks, kKMeans, kGridXYH, kGridXY };

std::string_view to_string(VocabMethod m);
VocabMethod vocab_method_from_string(std::string_view s);

// Expected one-step corner-distance error, overall and per agent class.
struct FitStats {
  double expected_error = 0.0;
  std::array<double, kNumAgentClasses> class_error{};
  std::array<std::size_t, kNumAgentClasses> class_count{};
  std::size_t restarts = 1;
  std::size_t chosen_restart = 0;
};

/// The action vocabulary. Index order is frozen once built: token ids refer
/// to positions in this list.
class TemplateSet {
 public:
  TemplateSet(std::vector<Template> templates, VocabMethod method, double epsilon = 0.0,
              std::uint64_t seed = 0, FitStats stats = {});

  std::size_t size() const { return templates_.size(); }
  const Template& operator[](std::size_t i) const { return templates_[i]; }
  std::span<const Template> templates() const { return templates_; }
  VocabMethod method() const { return method_; }
  double epsilon() const { return epsilon_; }
  std::uint64_t seed() const { return seed_; }
  const FitStats& fit_stats() const { return stats_; }
  void set_fit_stats(const FitStats& s) { stats_ = s; }

  // Corner distance from every template to a local-frame target, under an l x w box.
  void distances(const AgentState& local, double length, double width, std::span<double> out) const;
  std::size_t nearest(const AgentState& local, double length, double width) const;

  std::string to_json() const;
  static TemplateSet from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static TemplateSet load(const std::filesystem::path& path);

 private:
  std::vector<Template> templates_;
  std::vector<double> cos_, sin_;
  VocabMethod method_;
  double epsilon_;
  std::uint64_t seed_;
  FitStats stats_;
};

/// One observed state change between consecutive valid states of an agent.
struct Transition {
  Template delta;
  AgentClass cls = AgentClass::kVehicle;
  double length = 1.0;
  double width = 1.0;
};

std::vector<Transition> extract_transitions(const Corpus& corpus);

// Expected one-step error of `ts` over `transitions`, under each transition's own box.
FitStats evaluate_one_step(const TemplateSet& ts, std::span<const Transition> transitions);

struct KDisksOptions {
  std::size_t restarts = 16;
  std::size_t max_holdout = 5000;
  std::size_t workers = 1;
};

TemplateSet fit_kdisks(std::span<const Transition> transitions, std::size_t n, double epsilon,
                       Rng& rng, const KDisksOptions& opts = {});

struct KMeansOptions {
  std::size_t max_iters = 40;
  std::size_t max_holdout = 5000;
  std::size_t workers = 1;
};

TemplateSet fit_kmeans(std::span<const Transition> transitions, std::size_t n,
                       std::size_t restarts, Rng& rng, const KMeansOptions& opts = {});

// Axis bounds shared by both grid baselines.
struct GridBounds {
  double x_lo = -0.3, x_hi = 3.5;
  double y_lo = -0.2, y_hi = 0.2;
  double h_lo = -0.1, h_hi = 0.1;
};

TemplateSet fit_grid_xyh(std::size_t n_x, std::size_t n_y, std::size_t n_h, const GridBounds& b = {});
TemplateSet fit_grid_xy(std::size_t n_x, std::size_t n_y, std::span<const Transition> transitions,
                        const GridBounds& b = {});

// Grid counts used for the nominal vocabulary sizes 128/256/384/512.
std::array<std::size_t, 3> grid_xyh_counts(std::size_t nominal);
std::size_t grid_xy_count(std::size_t nominal);

// Evenly spaced values over [lo, hi], both endpoints included.
std::vector<double> linspace(double lo, double hi, std::size_t n);

int tokenize_step(const AgentState& s0, const AgentState& s, const AgentMeta& m, const TemplateSet& ts);
AgentState render(const AgentState& s0, int token, const TemplateSet& ts);

// Categorical over templates with logits -d/sigma, truncated to nucleus p_top.
std::vector<double> noisy_token_distribution(const AgentState& s0, const AgentState& s,
                                             const AgentMeta& m, const TemplateSet& ts,
                                             double sigma, double p_top);
int tokenize_noisy(const AgentState& s0, const AgentState& s, const AgentMeta& m,
                   const TemplateSet& ts, double sigma, double p_top, Rng& rng);

/// Chain tokenization of one track. Index k holds the token that moves the
/// snapped state k-1 to snapped state k; anchors and invalid steps carry
/// kInvalidToken. error_per_step is NaN where the raw state is invalid.
struct TokenizedTrajectory {
  std::vector<int> token_ids;
  std::vector<AgentState> snapped_states;
  std::vector<double> error_per_step;
};

TokenizedTrajectory tokenize_trajectory(std::span<const AgentState> states, const AgentMeta& m,
                                        const TemplateSet& ts);

// Same chain with noisy input tokens drawn at each step; the chain itself
// follows the argmin tokens. Returns the noisy ids aligned with token_ids.
std::vector<int> noisy_chain_tokens(const TokenizedTrajectory& chain,
                                    std::span<const AgentState> states, const AgentMeta& m,
                                    const TemplateSet& ts, double sigma, double p_top, Rng& rng);

// Re-renders a chain from its anchor states and token ids.
std::vector<AgentState> rerender(const TokenizedTrajectory& chain, const TemplateSet& ts);

}  // namespace trajeglish
