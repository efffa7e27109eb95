#include "trajeglish/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace trajeglish {

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be > 0");
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::vector<double> nucleus(std::span<const double> probs, double p_top) {
  if (!(p_top > 0.0) || p_top > 1.0) throw std::invalid_argument("nucleus: p_top must be in (0, 1]");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    if (k > 0 && probs[i] <= 0.0) break;
    out[i] = probs[i];
    mass += probs[i];
    if (mass >= p_top) break;
  }
  for (double& v : out) v /= mass;
  return out;
}

double log_softmax_at(std::span<const double> logits, std::size_t index) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - mx);
  return logits[index] - mx - std::log(total);
}

}  // namespace trajeglish
