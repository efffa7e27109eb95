#pragma once

#include <cstddef>
#include <vector>

#include "trajeglish/geometry.hpp"

namespace trajeglish {

/// One spatial agent subset with its decoding order.
struct AgentWindow {
  std::size_t center = 0;
  std::vector<std::size_t> agents;  // decoding order
  std::size_t n_acted = 0;          // leading agents already covered by earlier windows
};

// Nearest `max_agents` agents to `center` (center included), by center
// distance, ties by index. Invalid entries of `positions` are skipped.
std::vector<std::size_t> window_around(const std::vector<AgentState>& positions, std::size_t center,
                                       std::size_t max_agents);

// Greedy cover of all valid agents. The first window is centered on `first`;
// each next center is the uncovered agent whose window overlaps the covered set
// most (ties to the lower index). Within a window, agents covered by earlier
// windows come first in their earlier acting order, the rest by distance.
std::vector<AgentWindow> select_windows(const std::vector<AgentState>& positions, std::size_t max_agents,
                                        std::size_t first);

}  // namespace trajeglish
