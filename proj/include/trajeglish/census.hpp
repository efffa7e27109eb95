#pragma once

#include <cstdint>

#include "trajeglish/scenario.hpp"

namespace trajeglish {

inline constexpr double kMovingThreshold = 0.1;  // meters from the first valid position

struct TokenCensus {
  std::uint64_t scenarios = 0;
  std::uint64_t agents = 0;
  std::uint64_t moving_agents = 0;
  std::uint64_t total_tokens = 0;   // one per consecutive valid state pair
  std::uint64_t moving_tokens = 0;  // tokens of agents that moved past the threshold
  double scene_seconds = 0.0;       // sum over scenarios of steps * tick
  double tokens_per_hour = 0.0;
};

TokenCensus token_census(const Corpus& corpus, double moving_threshold = kMovingThreshold);

// Token rate over recorded scene time: tokens / (steps * tick / 3600).
double tokens_per_hour(double tokens, double total_steps, double tick);

}  // namespace trajeglish
