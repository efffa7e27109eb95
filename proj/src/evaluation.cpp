#include "trajeglish/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"

namespace trajeglish {

namespace {

struct Accum {
  double sum = 0.0;
  std::size_t n = 0;
  std::array<double, kNumAgentClasses> cls_sum{};
  std::array<std::size_t, kNumAgentClasses> cls_n{};
  std::vector<double> step_sum;
  std::vector<std::size_t> step_n;
  std::vector<double> pred_sum;
  std::vector<std::size_t> pred_n;
  std::array<std::vector<double>, kNumAgentClasses> cls_pred_sum;
  std::array<std::vector<std::size_t>, kNumAgentClasses> cls_pred_n;

  explicit Accum(int steps = 0, int slots = 0)
      : step_sum(static_cast<std::size_t>(steps)),
        step_n(static_cast<std::size_t>(steps)),
        pred_sum(static_cast<std::size_t>(slots)),
        pred_n(static_cast<std::size_t>(slots)) {
    for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
      cls_pred_sum[k].assign(static_cast<std::size_t>(slots), 0.0);
      cls_pred_n[k].assign(static_cast<std::size_t>(slots), 0);
    }
  }

  void add(double nll, AgentClass cls, int step, int slot) {
    const auto c = static_cast<std::size_t>(cls);
    const auto s = static_cast<std::size_t>(step), k = static_cast<std::size_t>(slot);
    sum += nll;
    ++n;
    cls_sum[c] += nll;
    ++cls_n[c];
    step_sum[s] += nll;
    ++step_n[s];
    pred_sum[k] += nll;
    ++pred_n[k];
    cls_pred_sum[c][k] += nll;
    ++cls_pred_n[c][k];
  }

  void merge(const Accum& o) {
    sum += o.sum;
    n += o.n;
    for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
      cls_sum[c] += o.cls_sum[c];
      cls_n[c] += o.cls_n[c];
      for (std::size_t k = 0; k < pred_sum.size(); ++k) {
        cls_pred_sum[c][k] += o.cls_pred_sum[c][k];
        cls_pred_n[c][k] += o.cls_pred_n[c][k];
      }
    }
    for (std::size_t s = 0; s < step_sum.size(); ++s) {
      step_sum[s] += o.step_sum[s];
      step_n[s] += o.step_n[s];
    }
    for (std::size_t k = 0; k < pred_sum.size(); ++k) {
      pred_sum[k] += o.pred_sum[k];
      pred_n[k] += o.pred_n[k];
    }
  }
};

double ratio(double s, std::size_t n) {
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

std::vector<double> ratios(const std::vector<double>& s, const std::vector<std::size_t>& n) {
  std::vector<double> out(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) out[k] = ratio(s[k], n[k]);
  return out;
}

int window_length(const ModelConfig& cfg, int n_steps) { return n_steps > 0 ? n_steps : cfg.max_timesteps; }

}  // namespace

std::vector<TrainingExample> eval_examples(const TokenizedCorpus& data, const ModelConfig& cfg, int n_steps,
                                           std::size_t max_examples) {
  ExampleOptions opts;
  opts.n_steps = window_length(cfg, n_steps);
  opts.random_crop = opts.random_frame = opts.random_order = false;
  std::vector<TrainingExample> out;
  Rng unused(0);
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (max_examples && out.size() >= max_examples) break;
    if (auto ex = make_example(data, s, cfg, opts, unused)) out.push_back(std::move(*ex));
  }
  return out;
}

NllTable nll_eval(const Model& model, const TokenizedCorpus& data, const NllEvalOptions& opts) {
  const ModelConfig& cfg = model.config();
  const auto examples = eval_examples(data, cfg, opts.n_steps, opts.max_examples);
  if (examples.empty()) throw DataError("nll_eval: no evaluation windows");
  const int t_max = cfg.max_timesteps, slots = cfg.max_agents;
  std::vector<Accum> per(examples.size(), Accum(t_max, slots));

  parallel_for(examples.size(), opts.workers, [&](std::size_t e) {
    const TrainingExample& full = examples[e];
    const Scenario& sc = data.scenarios()[full.scenario];
    const int t_len = full.targets.n_steps;
    Accum& acc = per[e];
    Rng unused(0);

    // Optional context crop: keep the last context_limit + 1 steps of the window.
    TrainingExample ex = full;
    int first_scored = 0;
    if (opts.context_limit >= 0) {
      const int c = std::min(opts.context_limit, t_len - 1);
      const std::size_t start = full.t0 + static_cast<std::size_t>(t_len - 1 - c);
      std::vector<std::size_t> order;
      for (std::size_t a : full.agents) {
        if (data.chains(full.scenario)[a].snapped_states[start].valid) order.push_back(a);
      }
      if (order.empty()) return;
      auto cropped = make_example_at(data, full.scenario, start, c + 1, order.front(), order, cfg, {}, unused);
      if (!cropped) return;
      ex = std::move(*cropped);
      first_scored = c;
    }

    const int n = ex.targets.n_agents;
    auto score = [&](const TrainingExample& x, int only_slot) {
      const auto lp = token_log_probs(model.logits(x.inputs, x.init), x.targets);
      for (int t = first_scored; t < x.targets.n_steps; ++t) {
        for (int slot = 0; slot < n; ++slot) {
          if (only_slot >= 0 && slot != only_slot) continue;
          const double v = lp[static_cast<std::size_t>(t * n + slot)];
          if (std::isnan(v)) continue;
          acc.add(-v, sc.agents[x.agents[static_cast<std::size_t>(slot)]].meta.cls(), t, slot);
        }
      }
    };
    if (opts.intra_order_position < 0) {
      score(ex, -1);
      return;
    }
    const int k = std::min(opts.intra_order_position, n - 1);
    for (int a = 0; a < n; ++a) {
      std::vector<int> perm;
      for (int j = 0; j < n; ++j) {
        if (j != a) perm.push_back(j);
      }
      perm.insert(perm.begin() + k, a);
      TrainingExample moved = ex;
      moved.inputs = TokenGrid(n, ex.inputs.n_steps);
      moved.targets = TokenGrid(n, ex.targets.n_steps);
      for (int slot = 0; slot < n; ++slot) {
        const int src = perm[static_cast<std::size_t>(slot)];
        moved.init.agents[static_cast<std::size_t>(slot)] = ex.init.agents[static_cast<std::size_t>(src)];
        moved.agents[static_cast<std::size_t>(slot)] = ex.agents[static_cast<std::size_t>(src)];
        for (int t = 0; t < ex.targets.n_steps; ++t) {
          moved.inputs.at(slot, t) = ex.inputs.at(src, t);
          moved.targets.at(slot, t) = ex.targets.at(src, t);
        }
      }
      score(moved, k);
    }
  });

  Accum total(t_max, slots);
  for (const auto& a : per) total.merge(a);
  if (total.n == 0) throw DataError("nll_eval: no valid target tokens");
  NllTable out;
  out.mean = ratio(total.sum, total.n);
  out.tokens = total.n;
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    out.class_mean[c] = ratio(total.cls_sum[c], total.cls_n[c]);
    out.class_tokens[c] = total.cls_n[c];
    out.class_by_predecessors[c] = ratios(total.cls_pred_sum[c], total.cls_pred_n[c]);
    out.class_by_predecessors_count[c] = total.cls_pred_n[c];
  }
  out.by_step = ratios(total.step_sum, total.step_n);
  out.by_step_count = total.step_n;
  out.by_predecessors = ratios(total.pred_sum, total.pred_n);
  out.by_predecessors_count = total.pred_n;
  return out;
}

MetricReport nll_sweeps(const Model& model, const TokenizedCorpus& data, const NllSweepOptions& opts) {
  const ModelConfig& cfg = model.config();
  const int t_len = window_length(cfg, opts.n_steps);
  std::vector<int> contexts = opts.contexts;
  if (contexts.empty()) {
    for (int c = 0; c < t_len; ++c) contexts.push_back(c);
  }
  NllEvalOptions base;
  base.n_steps = t_len;
  base.max_examples = opts.max_examples;
  base.workers = opts.workers;

  MetricReport report;
  const NllTable all = nll_eval(model, data, base);
  report.scalar("nll", all.mean, "nats");
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    report.scalar("nll_" + std::string(to_string(static_cast<AgentClass>(c))), all.class_mean[c], "nats");
  }
  report.scalar("tokens", static_cast<double>(all.tokens), "count");

  NllEvalOptions full = base;
  full.context_limit = t_len - 1;
  const NllTable ref = nll_eval(model, data, full);
  report.scalar("nll_full_context", ref.mean, "nats");
  MetricReport::Curve ctx{"nats", "context steps", {}, {}};
  std::array<MetricReport::Curve, kNumAgentClasses> ctx_cls;
  for (auto& c : ctx_cls) c = {"nats", "context steps", {}, {}};
  for (int c : contexts) {
    NllEvalOptions o = base;
    o.context_limit = std::min(c, t_len - 1);
    const NllTable t = nll_eval(model, data, o);
    ctx.x.push_back(c);
    ctx.y.push_back(t.mean - ref.mean);
    for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
      ctx_cls[k].x.push_back(c);
      ctx_cls[k].y.push_back(t.class_mean[k] - ref.class_mean[k]);
    }
  }
  report.curve("nll_context_delta", ctx);
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    report.curve("nll_context_delta_" + std::string(to_string(static_cast<AgentClass>(k))), ctx_cls[k]);
  }

  MetricReport::Curve pred{"nats", "same-step predecessors", {}, {}};
  std::array<MetricReport::Curve, kNumAgentClasses> pred_cls;
  for (auto& c : pred_cls) c = {"nats", "same-step predecessors", {}, {}};
  for (int k = 0; k < cfg.max_agents; ++k) {
    NllEvalOptions o = base;
    o.intra_order_position = k;
    const NllTable t = nll_eval(model, data, o);
    pred.x.push_back(k);
    pred.y.push_back(t.mean);
    for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
      pred_cls[c].x.push_back(k);
      pred_cls[c].y.push_back(t.class_mean[c]);
    }
  }
  report.curve("nll_predecessors", pred);
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    report.curve("nll_predecessors_" + std::string(to_string(static_cast<AgentClass>(c))), pred_cls[c]);
  }
  return report;
}

}  // namespace trajeglish
