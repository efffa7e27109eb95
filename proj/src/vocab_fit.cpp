#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <stdexcept>

#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"
#include "trajeglish/tokenizer.hpp"

namespace trajeglish {

std::vector<Transition> extract_transitions(const Corpus& corpus) {
  std::vector<Transition> out;
  for (const auto& sc : corpus) {
    for (const auto& a : sc.agents) {
      for (std::size_t t = 1; t < a.states.size(); ++t) {
        const AgentState& prev = a.states[t - 1];
        const AgentState& cur = a.states[t];
        if (!prev.valid || !cur.valid) continue;
        const AgentState d = to_local(prev, cur);
        out.push_back({{d.x, d.y, d.h}, a.meta.cls(), a.meta.length(), a.meta.width()});
      }
    }
  }
  return out;
}

FitStats evaluate_one_step(const TemplateSet& ts, std::span<const Transition> transitions) {
  FitStats stats;
  std::array<double, kNumAgentClasses> sums{};
  double total = 0.0;
  std::vector<double> d(ts.size());
  for (const auto& tr : transitions) {
    ts.distances(tr.delta.as_state(), tr.length, tr.width, d);
    const double e = *std::min_element(d.begin(), d.end());
    const auto c = static_cast<std::size_t>(tr.cls);
    sums[c] += e;
    stats.class_count[c] += 1;
    total += e;
  }
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    stats.class_error[c] = stats.class_count[c] ? sums[c] / stats.class_count[c] : 0.0;
  }
  stats.expected_error = transitions.empty() ? 0.0 : total / transitions.size();
  return stats;
}

namespace {

// Scoring slice: a random subset of the data, disjoint from the sampling pool
// when there is enough data to spare one.
struct Slices {
  std::vector<Transition> pool;
  std::vector<Transition> scoring;
};

Slices make_slices(std::span<const Transition> transitions, std::size_t n, std::size_t max_holdout,
                   Rng& rng) {
  Slices s;
  std::vector<std::size_t> idx(transitions.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  const bool holdout = max_holdout > 0 && transitions.size() >= 20 * n;
  const std::size_t n_score = holdout ? std::min(max_holdout, transitions.size() / 10)
                                      : std::min(std::max<std::size_t>(max_holdout, 1), transitions.size());
  for (std::size_t k = 0; k < n_score; ++k) s.scoring.push_back(transitions[idx[k]]);
  if (holdout) {
    for (std::size_t k = n_score; k < idx.size(); ++k) s.pool.push_back(transitions[idx[k]]);
  } else {
    s.pool.assign(transitions.begin(), transitions.end());
  }
  return s;
}

template <typename Candidate>
TemplateSet pick_best(std::vector<Candidate>& candidates, std::span<const Transition> scoring,
                      std::size_t workers) {
  std::vector<FitStats> stats(candidates.size());
  parallel_for(candidates.size(), workers,
               [&](std::size_t r) { stats[r] = evaluate_one_step(*candidates[r], scoring); });
  std::size_t best = 0;
  for (std::size_t r = 1; r < candidates.size(); ++r) {
    if (stats[r].expected_error < stats[best].expected_error) best = r;
  }
  FitStats chosen = stats[best];
  chosen.restarts = candidates.size();
  chosen.chosen_restart = best;
  TemplateSet out = *candidates[best];
  out.set_fit_stats(chosen);
  return out;
}

std::vector<Template> sample_kdisks(const std::vector<Transition>& pool, const std::vector<double>& cs,
                                    const std::vector<double>& sn, std::size_t n, double epsilon,
                                    Rng& rng) {
  std::vector<std::uint32_t> alive(pool.size());
  std::iota(alive.begin(), alive.end(), 0u);
  std::vector<Template> chosen;
  chosen.reserve(n);
  while (chosen.size() < n) {
    if (alive.empty()) throw InsufficientDiversityError(chosen.size(), n);
    const std::uint32_t pick = alive[rng.index(alive.size())];
    const Template& x0 = pool[pick].delta;
    chosen.push_back(x0);
    const double c0 = cs[pick], s0 = sn[pick];
    std::size_t keep = 0;
    for (std::uint32_t i : alive) {
      const Template& x = pool[i].delta;
      // Unit 1 m x 1 m box for the fitting metric.
      const double d = corner_distance_raw(x0.dx - x.dx, x0.dy - x.dy, c0, s0, cs[i], sn[i], 0.5, 0.5);
      if (d > epsilon) alive[keep++] = i;
    }
    alive.resize(keep);
  }
  return chosen;
}

}  // namespace

TemplateSet fit_kdisks(std::span<const Transition> transitions, std::size_t n, double epsilon,
                       Rng& rng, const KDisksOptions& opts) {
  if (n == 0) throw std::invalid_argument("fit_kdisks: vocabulary size must be >= 1");
  if (epsilon < 0.0) throw std::invalid_argument("fit_kdisks: epsilon must be >= 0");
  if (transitions.empty()) throw InsufficientDiversityError(0, n);
  const std::uint64_t base = rng.next_u64();
  Rng split_rng(mix_seed(base, 0xffff));
  Slices slices = make_slices(transitions, n, opts.max_holdout, split_rng);
  std::vector<double> cs(slices.pool.size()), sn(slices.pool.size());
  for (std::size_t i = 0; i < slices.pool.size(); ++i) {
    cs[i] = std::cos(slices.pool[i].delta.dh);
    sn[i] = std::sin(slices.pool[i].delta.dh);
  }
  const std::size_t restarts = std::max<std::size_t>(1, opts.restarts);
  std::vector<std::optional<TemplateSet>> candidates(restarts);
  parallel_for(restarts, opts.workers, [&](std::size_t r) {
    Rng stream(mix_seed(base, r));
    candidates[r].emplace(sample_kdisks(slices.pool, cs, sn, n, epsilon, stream), VocabMethod::kKDisks,
                          epsilon, base);
  });
  return pick_best(candidates, slices.scoring, opts.workers);
}

namespace {

std::vector<Template> run_kmeans(std::span<const Transition> pts, std::size_t k, std::size_t max_iters,
                                 Rng& rng) {
  const std::size_t n = pts.size();
  std::vector<double> cx, cy;
  cx.reserve(k);
  cy.reserve(k);
  // k-means++ seeding on (dx, dy).
  std::vector<double> d2(n, INFINITY);
  std::size_t first = rng.index(n);
  cx.push_back(pts[first].delta.dx);
  cy.push_back(pts[first].delta.dy);
  while (cx.size() < k) {
    const double lx = cx.back(), ly = cy.back();
    for (std::size_t i = 0; i < n; ++i) {
      const double ex = pts[i].delta.dx - lx, ey = pts[i].delta.dy - ly;
      d2[i] = std::min(d2[i], ex * ex + ey * ey);
    }
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick;
    if (total <= 0.0) {
      pick = rng.index(n);
    } else {
      pick = rng.categorical(d2);
    }
    cx.push_back(pts[pick].delta.dx);
    cy.push_back(pts[pick].delta.dy);
  }

  std::vector<std::uint32_t> assign(n, 0);
  std::vector<double> sx(k), sy(k), sc(k), ss(k);
  std::vector<std::size_t> count(k);
  std::vector<double> hc(k), hs(k);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double px = pts[i].delta.dx, py = pts[i].delta.dy;
      double best = INFINITY;
      std::uint32_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double ex = px - cx[c], ey = py - cy[c];
        const double d = ex * ex + ey * ey;
        if (d < best) {
          best = d;
          arg = static_cast<std::uint32_t>(c);
        }
      }
      if (assign[i] != arg) changed = true;
      assign[i] = arg;
      d2[i] = best;
    }
    if (!changed) break;
    std::fill(sx.begin(), sx.end(), 0.0);
    std::fill(sy.begin(), sy.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sx[assign[i]] += pts[i].delta.dx;
      sy[assign[i]] += pts[i].delta.dy;
      count[assign[i]] += 1;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its center.
        const auto far = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
        cx[c] = pts[far].delta.dx;
        cy[c] = pts[far].delta.dy;
        d2[far] = 0.0;
      } else {
        cx[c] = sx[c] / count[c];
        cy[c] = sy[c] / count[c];
      }
    }
  }
  // Heading of each center: circular mean of its members' heading changes.
  std::fill(hc.begin(), hc.end(), 0.0);
  std::fill(hs.begin(), hs.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    hc[assign[i]] += std::cos(pts[i].delta.dh);
    hs[assign[i]] += std::sin(pts[i].delta.dh);
  }
  std::vector<Template> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double h = (hc[c] == 0.0 && hs[c] == 0.0) ? 0.0 : std::atan2(hs[c], hc[c]);
    out[c] = {cx[c], cy[c], h};
  }
  return out;
}

std::size_t count_distinct_xy(std::span<const Transition> pts) {
  std::vector<std::pair<double, double>> xy;
  xy.reserve(pts.size());
  for (const auto& p : pts) xy.emplace_back(p.delta.dx, p.delta.dy);
  std::sort(xy.begin(), xy.end());
  return static_cast<std::size_t>(std::unique(xy.begin(), xy.end()) - xy.begin());
}

}  // namespace

TemplateSet fit_kmeans(std::span<const Transition> transitions, std::size_t n, std::size_t restarts,
                       Rng& rng, const KMeansOptions& opts) {
  if (n == 0) throw std::invalid_argument("fit_kmeans: vocabulary size must be >= 1");
  const std::size_t distinct = count_distinct_xy(transitions);
  if (n > distinct) {
    throw DataError("fit_kmeans: requested " + std::to_string(n) + " clusters but data has only " +
                    std::to_string(distinct) + " distinct (dx, dy) points");
  }
  const std::uint64_t base = rng.next_u64();
  Rng split_rng(mix_seed(base, 0xffff));
  Slices slices = make_slices(transitions, n, opts.max_holdout, split_rng);
  restarts = std::max<std::size_t>(1, restarts);
  std::vector<std::optional<TemplateSet>> candidates(restarts);
  parallel_for(restarts, opts.workers, [&](std::size_t r) {
    Rng stream(mix_seed(base, r));
    candidates[r].emplace(run_kmeans(slices.pool, n, opts.max_iters, stream), VocabMethod::kKMeans, 0.0,
                          base);
  });
  return pick_best(candidates, slices.scoring, opts.workers);
}

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  if (n < 2) throw std::invalid_argument("linspace: need at least 2 values");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  v.back() = hi;
  return v;
}

TemplateSet fit_grid_xyh(std::size_t n_x, std::size_t n_y, std::size_t n_h, const GridBounds& b) {
  const auto xs = linspace(b.x_lo, b.x_hi, n_x);
  const auto ys = linspace(b.y_lo, b.y_hi, n_y);
  const auto hs = linspace(b.h_lo, b.h_hi, n_h);
  std::vector<Template> out;
  out.reserve(n_x * n_y * n_h);
  for (double x : xs) {
    for (double y : ys) {
      for (double h : hs) out.push_back({x, y, h});
    }
  }
  return TemplateSet(std::move(out), VocabMethod::kGridXYH);
}

TemplateSet fit_grid_xy(std::size_t n_x, std::size_t n_y, std::span<const Transition> transitions,
                        const GridBounds& b) {
  if (transitions.empty()) throw DataError("fit_grid_xy: no transitions to borrow headings from");
  const auto xs = linspace(b.x_lo, b.x_hi, n_x);
  const auto ys = linspace(b.y_lo, b.y_hi, n_y);
  std::vector<Template> out;
  out.reserve(n_x * n_y);
  for (double x : xs) {
    for (double y : ys) {
      double best = INFINITY;
      double heading = 0.0;
      for (const auto& tr : transitions) {
        const double ex = tr.delta.dx - x, ey = tr.delta.dy - y;
        const double d = ex * ex + ey * ey;
        if (d < best) {
          best = d;
          heading = tr.delta.dh;
        }
      }
      out.push_back({x, y, heading});
    }
  }
  return TemplateSet(std::move(out), VocabMethod::kGridXY);
}

std::array<std::size_t, 3> grid_xyh_counts(std::size_t nominal) {
  switch (nominal) {
    case 128: return {6, 6, 4};
    case 256: return {7, 7, 6};
    case 384: return {8, 8, 7};
    case 512: return {9, 9, 8};
    default: throw ConfigError("grid_xyh: nominal size must be one of 128/256/384/512");
  }
}

std::size_t grid_xy_count(std::size_t nominal) {
  switch (nominal) {
    case 128: return 12;
    case 256: return 16;
    case 384: return 20;
    case 512: return 23;
    default: throw ConfigError("grid_xy: nominal size must be one of 128/256/384/512");
  }
}

}  // namespace trajeglish
