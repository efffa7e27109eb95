#include "trajeglish/nn/optim.hpp"

#include <algorithm>
#include <cmath>

namespace trajeglish::nn {

double scheduled_lr(const AdamWConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (step >= cfg.total_steps) return 0.0;
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.total_steps - cfg.warmup_steps));
  return cfg.lr * static_cast<double>(cfg.total_steps - step) / span;
}

AdamW::AdamW(const ParamStore& store, AdamWConfig cfg) : cfg_(cfg) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.push_back(Mat::Zero(store[i].value.rows(), store[i].value.cols()));
    v_.push_back(Mat::Zero(store[i].value.rows(), store[i].value.cols()));
  }
}

double AdamW::step(ParamStore& store, Grads& grads) {
  const double lr = scheduled_lr(cfg_, t_);
  ++t_;
  if (cfg_.clip_norm > 0.0) {
    const double norm = grads.norm();
    if (norm > cfg_.clip_norm) grads.scale(cfg_.clip_norm / norm);
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store[i];
    const Mat& g = grads.g[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    if (p.decay && cfg_.weight_decay > 0.0) p.value *= 1.0 - lr * cfg_.weight_decay;
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
  return lr;
}

}  // namespace trajeglish::nn
