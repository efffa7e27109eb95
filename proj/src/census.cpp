#include "trajeglish/census.hpp"

#include <algorithm>
#include <cmath>

namespace trajeglish {

TokenCensus token_census(const Corpus& corpus, double moving_threshold) {
  TokenCensus c;
  for (const auto& sc : corpus) {
    c.scenarios += 1;
    c.scene_seconds += static_cast<double>(sc.num_steps()) * sc.tick;
    for (const auto& a : sc.agents) {
      c.agents += 1;
      std::uint64_t tokens = 0;
      const AgentState* first = nullptr;
      double reach = 0.0;
      for (std::size_t t = 0; t < a.states.size(); ++t) {
        const auto& s = a.states[t];
        if (!s.valid) continue;
        if (!first) first = &s;
        reach = std::max(reach, std::hypot(s.x - first->x, s.y - first->y));
        if (t > 0 && a.states[t - 1].valid) ++tokens;
      }
      c.total_tokens += tokens;
      if (reach > moving_threshold) {
        c.moving_agents += 1;
        c.moving_tokens += tokens;
      }
    }
  }
  c.tokens_per_hour = c.scene_seconds > 0 ? static_cast<double>(c.total_tokens) * 3600.0 / c.scene_seconds : 0.0;
  return c;
}

double tokens_per_hour(double tokens, double total_steps, double tick) {
  return tokens * 3600.0 / (total_steps * tick);
}

}  // namespace trajeglish
