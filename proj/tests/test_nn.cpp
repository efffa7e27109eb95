#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "trajeglish/nn/graph.hpp"
#include "trajeglish/nn/optim.hpp"

using namespace trajeglish;
using namespace trajeglish::nn;

namespace {

using LossFn = std::function<Graph::Id(Graph&)>;

double eval(const ParamStore& store, const LossFn& f) {
  Graph g(store);
  return g.value(f(g))(0, 0);
}

// Worst relative error across parameters between backprop and central differences.
double grad_check(ParamStore& store, const LossFn& f, double h = 1e-5) {
  Grads grads(store);
  {
    Graph g(store, &grads);
    g.backward(f(g));
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < store.size(); ++p) {
    Mat& v = store[p].value;
    Mat fd(v.rows(), v.cols());
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      const double orig = v.data()[k];
      v.data()[k] = orig + h;
      const double up = eval(store, f);
      v.data()[k] = orig - h;
      const double down = eval(store, f);
      v.data()[k] = orig;
      fd.data()[k] = (up - down) / (2 * h);
    }
    const double denom = std::max(grads.g[p].norm() + fd.norm(), 1e-10);
    worst = std::max(worst, (grads.g[p] - fd).norm() / denom);
  }
  return worst;
}

ParamStore store_with(std::initializer_list<std::tuple<const char*, int, int>> shapes, std::uint64_t seed = 3) {
  ParamStore s;
  Rng rng(seed);
  for (const auto& [name, r, c] : shapes) s.add_normal(name, r, c, 1.0, rng);
  return s;
}

// Reduces any matrix to a scalar with a fixed random projection so gradients are non-uniform.
Graph::Id reduce(Graph& g, Graph::Id x) {
  const Mat& v = g.value(x);
  Rng rng(99);
  Mat w(v.cols(), 1);
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = rng.normal();
  Mat ones = Mat::Constant(1, v.rows(), 1.0);
  return g.matmul(g.constant(ones), g.matmul(x, g.constant(w)));
}

}  // namespace

TEST(GradCheck, MatmulAddGelu) {
  auto s = store_with({{"a", 3, 4}, {"b", 4, 5}, {"c", 1, 5}});
  const double err = grad_check(s, [](Graph& g) {
    return reduce(g, g.gelu(g.linear(g.param(0), g.param(1), g.param(2))));
  });
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, MatmulNtAndScale) {
  auto s = store_with({{"a", 3, 4}, {"b", 5, 4}});
  EXPECT_LT(grad_check(s, [](Graph& g) { return reduce(g, g.scale(g.matmul_nt(g.param(0), g.param(1)), 0.7)); }),
            1e-6);
}

TEST(GradCheck, LayerNorm) {
  auto s = store_with({{"x", 4, 6}, {"g", 1, 6}, {"b", 1, 6}});
  EXPECT_LT(grad_check(s, [](Graph& g) { return reduce(g, g.layer_norm(g.param(0), g.param(1), g.param(2))); }),
            1e-6);
}

TEST(GradCheck, EmbedGatherConcatSlice) {
  auto s = store_with({{"t", 5, 3}, {"u", 2, 3}});
  EXPECT_LT(grad_check(s,
                       [](Graph& g) {
                         const auto e = g.embed(g.param(0), {4, -1, 0, 4});
                         const auto r = g.gather_rows(g.param(1), {1, 1, 0});
                         const auto c = g.concat_rows({e, r});
                         return reduce(g, g.slice_rows(c, 1, 5));
                       }),
            1e-6);
}

TEST(GradCheck, MaxPoolGroups) {
  auto s = store_with({{"x", 6, 3}});
  EXPECT_LT(grad_check(s, [](Graph& g) { return reduce(g, g.max_pool_groups(g.param(0), {0, 2, 3, 6})); }), 1e-6);
}

TEST(GradCheck, MaskedMultiHeadAttention) {
  auto s = store_with({{"q", 4, 6}, {"k", 5, 6}, {"v", 5, 6}});
  Mask m(4, 5);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c <= r; ++c) m.set(r, c, true);
  }
  m.set(3, 4, true);
  EXPECT_LT(grad_check(s, [&](Graph& g) {
              return reduce(g, g.attention(g.param(0), g.param(1), g.param(2), &m, 2));
            }),
            1e-6);
}

TEST(GradCheck, BiasedAttention) {
  auto s = store_with({{"q", 4, 6}, {"k", 5, 6}, {"v", 5, 6}, {"b", 1, 2}});
  Mask m(4, 5), where(4, 5);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c <= r + 1; ++c) m.set(r, c, true);
    where.set(r, (r + 1) % 5, true);
    where.set(r, 0, r % 2 == 0);
  }
  EXPECT_LT(grad_check(s, [&](Graph& g) {
              return reduce(g, g.attention(g.param(0), g.param(1), g.param(2), &m, 2, g.param(3), &where));
            }),
            1e-6);
}

TEST(Attention, BiasShiftsOnlyFlaggedScores) {
  ParamStore s;
  s.add_constant("b", 1, 1, 0.0);
  Mat q = Mat::Zero(1, 2), k = Mat::Zero(2, 2), v(2, 2);
  v << 1, 0, 0, 1;
  Mask where(1, 2);
  where.set(0, 1, true);
  s[0].value(0, 0) = std::log(3.0);
  Graph g(s);
  const Mat out = g.value(g.attention(g.constant(q), g.constant(k), g.constant(v), nullptr, 1, g.param(0), &where));
  EXPECT_NEAR(out(0, 0), 0.25, 1e-12);
  EXPECT_NEAR(out(0, 1), 0.75, 1e-12);
}

TEST(GradCheck, CrossEntropy) {
  auto s = store_with({{"l", 4, 7}});
  EXPECT_LT(grad_check(s, [](Graph& g) { return g.cross_entropy(g.param(0), {3, -1, 0, 6}); }), 1e-6);
}

TEST(Attention, RowWithoutKeysIsZero) {
  ParamStore s;
  Graph g(s);
  Mat q = Mat::Ones(2, 4), k = Mat::Ones(3, 4), v = Mat::Ones(3, 4);
  Mask m(2, 3);
  m.set(1, 0, true);
  const auto out = g.attention(g.constant(q), g.constant(k), g.constant(v), &m, 2);
  EXPECT_EQ(g.value(out).row(0).norm(), 0.0);
  EXPECT_NEAR(g.value(out)(1, 0), 1.0, 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  ParamStore s;
  Graph g(s);
  const auto l = g.cross_entropy(g.constant(Mat::Zero(3, 384)), {0, 5, 383});
  EXPECT_NEAR(g.value(l)(0, 0), std::log(384.0), 1e-12);
}

TEST(CrossEntropy, NoValidTargetThrows) {
  ParamStore s;
  Graph g(s);
  EXPECT_ANY_THROW(g.cross_entropy(g.constant(Mat::Zero(2, 4)), {-1, -1}));
}

TEST(AdamW, FirstStepMatchesClosedForm) {
  ParamStore s;
  s.add_constant("w", 1, 2, 1.0);
  Rng rng(0);
  s.add_normal("d", 1, 1, 0.0, rng);
  s[1].value(0, 0) = 2.0;
  Grads gr(s);
  gr.g[0] << 0.5, -0.25;
  gr.g[1](0, 0) = 0.1;
  AdamWConfig cfg;
  cfg.lr = 1e-2;
  cfg.warmup_steps = 0;
  cfg.total_steps = 100;
  cfg.clip_norm = 0.0;
  AdamW opt(s, cfg);
  const double lr = scheduled_lr(cfg, 0);
  opt.step(s, gr);
  // Bias-corrected first step moves each coordinate by lr * sign(g) (up to eps).
  EXPECT_NEAR(s[0].value(0, 0), 1.0 - lr, 1e-9);
  EXPECT_NEAR(s[0].value(0, 1), 1.0 + lr, 1e-9);
  // Decay-flagged parameter also shrinks by lr * wd * w.
  EXPECT_NEAR(s[1].value(0, 0), 2.0 - lr - lr * cfg.weight_decay * 2.0, 1e-8);
}

TEST(AdamW, ScheduleWarmsUpThenDecays) {
  AdamWConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  EXPECT_LT(scheduled_lr(cfg, 0), scheduled_lr(cfg, 5));
  EXPECT_NEAR(scheduled_lr(cfg, 10), 1.0, 1e-12);
  EXPECT_GT(scheduled_lr(cfg, 10), scheduled_lr(cfg, 60));
  EXPECT_NEAR(scheduled_lr(cfg, 110), 0.0, 1e-12);
}

TEST(Grads, ClipScalesToNorm) {
  ParamStore s;
  s.add_constant("w", 1, 2, 0.0);
  Grads g(s);
  g.g[0] << 3.0, 4.0;
  EXPECT_NEAR(g.norm(), 5.0, 1e-12);
  g.scale(0.2);
  EXPECT_NEAR(g.norm(), 1.0, 1e-12);
}
