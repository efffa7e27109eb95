#include "trajeglish/discretization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trajeglish/parallel.hpp"

namespace trajeglish {

std::vector<TokenizedTrajectory> tokenize_scenario(const Scenario& sc, const TemplateSet& ts) {
  std::vector<TokenizedTrajectory> out;
  out.reserve(sc.agents.size());
  for (const auto& a : sc.agents) out.push_back(tokenize_trajectory(a.states, a.meta, ts));
  return out;
}

StateGrid snapped_grid(std::span<const TokenizedTrajectory> chains) {
  StateGrid g;
  g.reserve(chains.size());
  for (const auto& c : chains) g.push_back(c.snapped_states);
  return g;
}

namespace {

struct Accum {
  std::vector<double> err_sum;
  std::vector<std::size_t> err_n;
  std::array<std::vector<double>, kNumAgentClasses> cls_sum;
  std::array<std::vector<std::size_t>, kNumAgentClasses> cls_n;
  std::vector<double> raw_hit, tok_hit, valid;

  void grow(std::size_t n) {
    if (err_sum.size() >= n) return;
    err_sum.resize(n, 0.0);
    err_n.resize(n, 0);
    for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
      cls_sum[k].resize(n, 0.0);
      cls_n[k].resize(n, 0);
    }
  }
  void grow_steps(std::size_t n) {
    if (valid.size() >= n) return;
    raw_hit.resize(n, 0.0);
    tok_hit.resize(n, 0.0);
    valid.resize(n, 0.0);
  }
};

}  // namespace

DiscretizationReport discretization_report(const Corpus& corpus, const TemplateSet& ts, std::size_t workers) {
  std::vector<Accum> per(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t s) {
    const Scenario& sc = corpus[s];
    Accum& acc = per[s];
    const auto chains = tokenize_scenario(sc, ts);
    for (std::size_t i = 0; i < chains.size(); ++i) {
      const auto k = static_cast<std::size_t>(sc.agents[i].meta.cls());
      std::size_t since = 0;
      for (std::size_t t = 0; t < chains[i].token_ids.size(); ++t) {
        if (!sc.agents[i].states[t].valid) continue;
        since = chains[i].token_ids[t] == kInvalidToken ? 0 : since + 1;
        acc.grow(since + 1);
        acc.err_sum[since] += chains[i].error_per_step[t];
        acc.err_n[since] += 1;
        acc.cls_sum[k][since] += chains[i].error_per_step[t];
        acc.cls_n[k][since] += 1;
      }
    }
    const auto metas = metas_of(sc);
    const auto raw = collision_rate(state_grid(sc), metas);
    const auto tok = collision_rate(snapped_grid(chains), metas);
    acc.grow_steps(raw.per_step.size());
    for (std::size_t t = 0; t < raw.per_step.size(); ++t) {
      std::size_t n_valid = 0;
      for (const auto& a : sc.agents) n_valid += a.states[t].valid;
      acc.raw_hit[t] += raw.per_step[t] * static_cast<double>(n_valid);
      acc.tok_hit[t] += tok.per_step[t] * static_cast<double>(n_valid);
      acc.valid[t] += static_cast<double>(n_valid);
    }
  });

  Accum total;
  for (const auto& a : per) {
    total.grow(a.err_sum.size());
    total.grow_steps(a.valid.size());
    for (std::size_t i = 0; i < a.err_sum.size(); ++i) {
      total.err_sum[i] += a.err_sum[i];
      total.err_n[i] += a.err_n[i];
      for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
        total.cls_sum[k][i] += a.cls_sum[k][i];
        total.cls_n[k][i] += a.cls_n[k][i];
      }
    }
    for (std::size_t t = 0; t < a.valid.size(); ++t) {
      total.raw_hit[t] += a.raw_hit[t];
      total.tok_hit[t] += a.tok_hit[t];
      total.valid[t] += a.valid[t];
    }
  }

  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  DiscretizationReport r;
  double sum = 0.0;
  std::array<double, kNumAgentClasses> csum{};
  std::array<std::size_t, kNumAgentClasses> cn{};
  for (std::size_t i = 0; i < total.err_sum.size(); ++i) {
    r.error_curve.push_back(total.err_n[i] ? total.err_sum[i] / static_cast<double>(total.err_n[i]) : kNaN);
    for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
      r.class_error_curve[k].push_back(total.cls_n[k][i] ? total.cls_sum[k][i] / static_cast<double>(total.cls_n[k][i])
                                                         : kNaN);
      if (i > 0) {
        csum[k] += total.cls_sum[k][i];
        cn[k] += total.cls_n[k][i];
      }
    }
    if (i > 0) {
      sum += total.err_sum[i];
      r.tokenized_steps += total.err_n[i];
    }
  }
  r.mean_error = r.tokenized_steps ? sum / static_cast<double>(r.tokenized_steps) : 0.0;
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    r.class_mean_error[k] = cn[k] ? csum[k] / static_cast<double>(cn[k]) : kNaN;
  }
  for (std::size_t t = 0; t < total.valid.size(); ++t) {
    const double v = total.valid[t];
    r.collision_raw.push_back(v > 0 ? total.raw_hit[t] / v : 0.0);
    r.collision_tokenized.push_back(v > 0 ? total.tok_hit[t] / v : 0.0);
    r.max_collision_gap = std::max(r.max_collision_gap, std::abs(r.collision_tokenized[t] - r.collision_raw[t]));
  }
  return r;
}

MetricReport DiscretizationReport::to_report(double tick) const {
  MetricReport rep;
  rep.scalar("mean_error", mean_error, "m");
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    rep.scalar("mean_error/" + std::string(to_string(static_cast<AgentClass>(k))), class_mean_error[k], "m");
  }
  rep.scalar("tokenized_steps", static_cast<double>(tokenized_steps));
  rep.scalar("max_collision_gap", max_collision_gap, "probability");
  auto steps = [&](std::size_t n) {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i) * tick;
    return x;
  };
  rep.curve("error_vs_length", {"m", "seconds since anchor", steps(error_curve.size()), error_curve});
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    rep.curve("error_vs_length/" + std::string(to_string(static_cast<AgentClass>(k))),
              {"m", "seconds since anchor", steps(class_error_curve[k].size()), class_error_curve[k]});
  }
  rep.curve("collision/raw", {"probability", "seconds", steps(collision_raw.size()), collision_raw});
  rep.curve("collision/tokenized", {"probability", "seconds", steps(collision_tokenized.size()), collision_tokenized});
  return rep;
}

}  // namespace trajeglish
