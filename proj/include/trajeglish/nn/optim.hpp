#pragma once

#include <vector>

#include "trajeglish/nn/graph.hpp"

namespace trajeglish::nn {

struct AdamWConfig {
  double lr = 5e-4;  // peak learning rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 10000;  // linear decay reaches zero here
  double clip_norm = 1.0;           // global gradient norm clip; <= 0 disables
};

// Linear warmup to the peak rate, then linear decay to zero at total_steps.
double scheduled_lr(const AdamWConfig& cfg, std::size_t step);

/// Adam with decoupled weight decay. Decay applies only to params flagged `decay`.
class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWConfig cfg);

  // Applies one update from `grads`; returns the learning rate used.
  double step(ParamStore& store, Grads& grads);
  std::size_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<Mat> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace trajeglish::nn
