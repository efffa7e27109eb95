#include "trajeglish/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace trajeglish {

std::vector<std::size_t> window_around(const std::vector<AgentState>& positions, std::size_t center,
                                       std::size_t max_agents) {
  const AgentState& c = positions.at(center);
  if (!c.valid) throw std::invalid_argument("window_around: center is not valid");
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!positions[i].valid) continue;
    cand.emplace_back(i == center ? -1.0 : std::hypot(positions[i].x - c.x, positions[i].y - c.y), i);
  }
  std::sort(cand.begin(), cand.end());
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < std::min(max_agents, cand.size()); ++k) out.push_back(cand[k].second);
  return out;
}

std::vector<AgentWindow> select_windows(const std::vector<AgentState>& positions, std::size_t max_agents,
                                        std::size_t first) {
  if (max_agents < 1) throw std::invalid_argument("select_windows: max_agents must be >= 1");
  const std::size_t n = positions.size();
  std::vector<std::vector<std::size_t>> around(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (positions[i].valid) around[i] = window_around(positions, i, max_agents);
  }
  // Rank of each agent in the global acting order; npos until covered.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> rank(n, npos);
  std::size_t next_rank = 0;
  std::vector<AgentWindow> out;

  auto add = [&](std::size_t center) {
    AgentWindow w;
    w.center = center;
    std::vector<std::size_t> acted, fresh;
    for (std::size_t a : around[center]) (rank[a] != npos ? acted : fresh).push_back(a);
    std::sort(acted.begin(), acted.end(), [&](std::size_t a, std::size_t b) { return rank[a] < rank[b]; });
    w.n_acted = acted.size();
    w.agents = acted;
    w.agents.insert(w.agents.end(), fresh.begin(), fresh.end());  // already by distance
    for (std::size_t a : fresh) rank[a] = next_rank++;
    out.push_back(std::move(w));
  };

  add(first);
  for (;;) {
    std::size_t best = npos, best_overlap = 0;
    for (std::size_t u = 0; u < n; ++u) {
      if (!positions[u].valid || rank[u] != npos) continue;
      std::size_t overlap = 0;
      for (std::size_t a : around[u]) overlap += rank[a] != npos;
      if (best == npos || overlap > best_overlap) {
        best = u;
        best_overlap = overlap;
      }
    }
    if (best == npos) break;
    add(best);
  }
  return out;
}

}  // namespace trajeglish
