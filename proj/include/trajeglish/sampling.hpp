#pragma once

#include <span>
#include <vector>

#include "trajeglish/random.hpp"

namespace trajeglish {

// Numerically stable softmax of logits / temperature.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

// Keeps the smallest most-probable set whose mass reaches p_top and renormalizes.
// Ties in probability are ranked by lower index first.
std::vector<double> nucleus(std::span<const double> probs, double p_top);

// log softmax(logits)[index], computed stably.
double log_softmax_at(std::span<const double> logits, std::size_t index);

}  // namespace trajeglish
