#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "trajeglish/sampling.hpp"
#include "trajeglish/synthetic.hpp"
#include "trajeglish/tokenizer.hpp"

using namespace trajeglish;

namespace {

constexpr double kPi = std::numbers::pi;

TemplateSet small_vocab() {
  std::vector<Template> t;
  for (int i = 0; i < 5; ++i) {
    for (int j = -2; j <= 2; ++j) {
      for (int k = -1; k <= 1; ++k) t.push_back({0.6 * i, 0.1 * j, 0.05 * k});
    }
  }
  return TemplateSet(std::move(t), VocabMethod::kGridXYH);
}

AgentState random_state(Rng& rng) {
  return AgentState::make(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-kPi, kPi));
}

}  // namespace

TEST(TokenizeStep, ExactTemplateRecovered) {
  const auto ts = small_vocab();
  Rng rng(1);
  const AgentMeta m(4.5, 2.0);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const auto s0 = random_state(rng);
    EXPECT_EQ(tokenize_step(s0, to_global(s0, ts[j].as_state()), m, ts), static_cast<int>(j));
  }
}

TEST(TokenizeStep, StationaryPicksZeroTemplate) {
  const auto ts = small_vocab();
  const auto s0 = AgentState::make(3, 4, 1.0);
  const int tok = tokenize_step(s0, s0, AgentMeta(1, 1), ts);
  EXPECT_EQ(ts[tok], (Template{0, 0, 0}));
}

TEST(TokenizeStep, MatchesLinearScanOracle) {
  const auto ts = small_vocab();
  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const AgentMeta m(rng.uniform(0.5, 5), rng.uniform(0.5, 2.5));
    const auto s0 = random_state(rng);
    const auto target = to_global(s0, AgentState::make(rng.uniform(-0.5, 3), rng.uniform(-0.3, 0.3),
                                                       rng.uniform(-0.1, 0.1)));
    const auto local = to_local(s0, target);
    double best = INFINITY;
    int arg = -1;
    for (std::size_t j = 0; j < ts.size(); ++j) {
      const double d = corner_distance(ts[j].as_state(), local, m);
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    ASSERT_EQ(tokenize_step(s0, target, m, ts), arg);
  }
}

TEST(TokenizeStep, TiesGoToLowestIndex) {
  TemplateSet ts({{1, 0, 0}, {-1, 0, 0}}, VocabMethod::kKDisks);
  EXPECT_EQ(tokenize_step(AgentState::make(0, 0, 0), AgentState::make(0, 0, 0), AgentMeta(1, 1), ts), 0);
}

TEST(Render, ZeroTemplateIsIdentity) {
  const auto ts = small_vocab();
  const auto s0 = AgentState::make(1, 2, 0.3);
  int zero = -1;
  for (std::size_t j = 0; j < ts.size(); ++j) {
    if (ts[j] == Template{0, 0, 0}) zero = static_cast<int>(j);
  }
  const auto r = render(s0, zero, ts);
  EXPECT_NEAR(r.x, s0.x, 1e-12);
  EXPECT_NEAR(r.y, s0.y, 1e-12);
  EXPECT_NEAR(r.h, s0.h, 1e-12);
}

TEST(Render, HandCheckedExample) {
  TemplateSet ts({{1, 0, 0}}, VocabMethod::kKDisks);
  const auto r = render(AgentState::make(1, 1, kPi / 2), 0, ts);
  EXPECT_NEAR(r.x, 1, 1e-12);
  EXPECT_NEAR(r.y, 2, 1e-12);
  EXPECT_NEAR(r.h, kPi / 2, 1e-12);
}

TEST(Render, OutOfRangeThrows) {
  const auto ts = small_vocab();
  EXPECT_THROW(render(AgentState::make(0, 0, 0), static_cast<int>(ts.size()), ts), std::out_of_range);
  EXPECT_THROW(render(AgentState::make(0, 0, 0), -1, ts), std::out_of_range);
}

TEST(Render, TokenizeThenRenderIsClose) {
  const auto ts = small_vocab();
  Rng rng(9);
  const AgentMeta m(1, 1);
  for (int i = 0; i < 1000; ++i) {
    const auto s0 = random_state(rng);
    const auto s = to_global(s0, AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                  rng.uniform(-0.05, 0.05)));
    const auto r = render(s0, tokenize_step(s0, s, m, ts), ts);
    // Half the grid diagonal bounds the nearest-template distance here.
    EXPECT_LT(corner_distance(r, s, m), 0.35);
  }
}

TEST(TokenizeTrajectory, ReplayedTokensRoundTrip) {
  const auto ts = small_vocab();
  Rng rng(4);
  const AgentMeta m(4, 2);
  std::vector<int> tokens(40);
  std::vector<AgentState> states{AgentState::make(5, -3, 0.4)};
  for (std::size_t k = 1; k < tokens.size(); ++k) {
    tokens[k] = static_cast<int>(rng.index(ts.size()));
    states.push_back(render(states.back(), tokens[k], ts));
  }
  const auto chain = tokenize_trajectory(states, m, ts);
  EXPECT_EQ(chain.token_ids[0], kInvalidToken);
  for (std::size_t k = 1; k < tokens.size(); ++k) {
    EXPECT_EQ(chain.token_ids[k], tokens[k]);
    EXPECT_NEAR(chain.error_per_step[k], 0.0, 1e-9);
  }
}

TEST(TokenizeTrajectory, ConstantDisplacementGivesConstantToken) {
  const auto ts = small_vocab();
  std::vector<AgentState> states;
  for (int k = 0; k < 20; ++k) states.push_back(AgentState::make(1.2 * k, 0, 0));
  const auto chain = tokenize_trajectory(states, AgentMeta(4, 2), ts);
  for (int k = 1; k < 20; ++k) EXPECT_EQ(ts[chain.token_ids[k]], (Template{1.2, 0, 0}));
}

TEST(TokenizeTrajectory, ChainRerenderIsBitExact) {
  const auto ts = small_vocab();
  Rng rng(12);
  std::vector<AgentState> states{AgentState::make(0, 0, 0.2)};
  for (int k = 1; k < 50; ++k) {
    states.push_back(to_global(states.back(), AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                               rng.uniform(-0.05, 0.05))));
  }
  states[20] = AgentState::invalid();
  states[21] = AgentState::invalid();
  const auto chain = tokenize_trajectory(states, AgentMeta(4, 2), ts);
  const auto re = rerender(chain, ts);
  ASSERT_EQ(re.size(), chain.snapped_states.size());
  for (std::size_t k = 0; k < re.size(); ++k) EXPECT_EQ(re[k], chain.snapped_states[k]);
  for (std::size_t k = 1; k < states.size(); ++k) {
    if (!states[k].valid || !states[k - 1].valid) continue;
    EXPECT_EQ(chain.snapped_states[k], render(chain.snapped_states[k - 1], chain.token_ids[k], ts));
  }
}

TEST(TokenizeTrajectory, GapReanchors) {
  const auto ts = small_vocab();
  std::vector<AgentState> states;
  for (int k = 0; k < 10; ++k) states.push_back(AgentState::make(0.6 * k, 0, 0));
  states[4] = AgentState::invalid();
  const auto chain = tokenize_trajectory(states, AgentMeta(1, 1), ts);
  EXPECT_EQ(chain.token_ids[4], kInvalidToken);
  EXPECT_EQ(chain.token_ids[5], kInvalidToken);  // re-anchor
  EXPECT_EQ(chain.snapped_states[5], states[5]);
  EXPECT_TRUE(std::isnan(chain.error_per_step[4]));
  EXPECT_NE(chain.token_ids[6], kInvalidToken);
  EXPECT_FALSE(chain.snapped_states[4].valid);
}

TEST(TokenizeTrajectory, FrameInvariant) {
  const auto ts = small_vocab();
  Rng rng(31);
  std::vector<AgentState> states{AgentState::make(0, 0, 0)};
  for (int k = 1; k < 30; ++k) {
    states.push_back(to_global(states.back(), AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                               rng.uniform(-0.05, 0.05))));
  }
  const auto frame = AgentState::make(123.0, -45.0, 2.0);
  std::vector<AgentState> moved;
  for (const auto& s : states) moved.push_back(to_global(frame, s));
  const AgentMeta m(4, 2);
  EXPECT_EQ(tokenize_trajectory(states, m, ts).token_ids, tokenize_trajectory(moved, m, ts).token_ids);
}

TEST(TokenizeTrajectory, TimeShiftInvariant) {
  const auto ts = small_vocab();
  Rng rng(32);
  std::vector<AgentState> states{AgentState::make(0, 0, 0)};
  for (int k = 1; k < 30; ++k) {
    states.push_back(to_global(states.back(), AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                               rng.uniform(-0.05, 0.05))));
  }
  std::vector<AgentState> shifted(5, AgentState::invalid());
  shifted.insert(shifted.end(), states.begin(), states.end());
  const AgentMeta m(4, 2);
  const auto a = tokenize_trajectory(states, m, ts).token_ids;
  const auto b = tokenize_trajectory(shifted, m, ts).token_ids;
  EXPECT_EQ(a, std::vector<int>(b.begin() + 5, b.end()));
}

TEST(NoisyTokenizer, TinySigmaIsDeterministic) {
  const auto ts = small_vocab();
  Rng rng(5), draw(6);
  for (int i = 0; i < 2000; ++i) {
    const AgentMeta m(rng.uniform(0.5, 5), rng.uniform(0.5, 2.5));
    const auto s0 = random_state(rng);
    const auto s = to_global(s0, AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                  rng.uniform(-0.05, 0.05)));
    ASSERT_EQ(tokenize_noisy(s0, s, m, ts, 1e-12, 1.0, draw), tokenize_step(s0, s, m, ts));
  }
}

TEST(NoisyTokenizer, EquidistantTemplatesSplitEvenly) {
  TemplateSet ts({{1, 0, 0}, {-1, 0, 0}, {5, 5, 0}}, VocabMethod::kKDisks);
  Rng rng(8);
  int first = 0;
  const int n = 10000;
  const auto s0 = AgentState::make(0, 0, 0);
  for (int i = 0; i < n; ++i) {
    const int tok = tokenize_noisy(s0, s0, AgentMeta(1, 1), ts, 0.1, 1.0, rng);
    ASSERT_NE(tok, 2);
    first += tok == 0;
  }
  EXPECT_NEAR(static_cast<double>(first) / n, 0.5, 0.02);
}

TEST(NoisyTokenizer, DistributionMatchesAnalyticTruncatedSoftmax) {
  const auto ts = small_vocab();
  const auto s0 = AgentState::make(0, 0, 0);
  const auto s = AgentState::make(0.9, 0.05, 0.02);
  const AgentMeta m(1, 1);
  const double sigma = 0.008, p_top = 0.95;
  const auto p = noisy_token_distribution(s0, s, m, ts, sigma, p_top);
  std::vector<double> logits(ts.size());
  std::vector<double> d(ts.size());
  ts.distances(to_local(s0, s), m.length(), m.width(), d);
  for (std::size_t j = 0; j < d.size(); ++j) logits[j] = -d[j] / sigma;
  const auto oracle = nucleus(softmax(logits), p_top);
  double sum = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    EXPECT_NEAR(p[j], oracle[j], 1e-12);
    sum += p[j];
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);

  Rng rng(10);
  const int n = 20000;
  std::vector<int> counts(ts.size(), 0);
  for (int i = 0; i < n; ++i) counts[tokenize_noisy(s0, s, m, ts, sigma, p_top, rng)]++;
  double chi2 = 0;
  int dof = -1;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0) {
      EXPECT_EQ(counts[j], 0);
      continue;
    }
    const double e = n * p[j];
    chi2 += (counts[j] - e) * (counts[j] - e) / e;
    ++dof;
  }
  ASSERT_GT(dof, 0);
  // Loose upper bound for p > 0.01 at small dof (chi2 critical value < dof + 4.5 sqrt(dof) + 7).
  EXPECT_LT(chi2, dof + 4.5 * std::sqrt(dof) + 7);
}

TEST(NoisyTokenizer, ZeroSigmaIsArgminOneHot) {
  const auto ts = small_vocab();
  const auto s0 = AgentState::make(0, 0, 0);
  const auto s = AgentState::make(0.7, 0.0, 0.0);
  const auto p = noisy_token_distribution(s0, s, AgentMeta(1, 1), ts, 0.0, 1.0);
  const int arg = tokenize_step(s0, s, AgentMeta(1, 1), ts);
  for (std::size_t j = 0; j < p.size(); ++j) EXPECT_EQ(p[j], static_cast<int>(j) == arg ? 1.0 : 0.0);
}

TEST(NoisyChain, TargetsStayArgmin) {
  const auto ts = small_vocab();
  Rng rng(14);
  std::vector<AgentState> states{AgentState::make(0, 0, 0)};
  for (int k = 1; k < 30; ++k) {
    states.push_back(to_global(states.back(), AgentState::make(rng.uniform(0, 2.4), rng.uniform(-0.2, 0.2),
                                                               rng.uniform(-0.05, 0.05))));
  }
  const AgentMeta m(4, 2);
  const auto chain = tokenize_trajectory(states, m, ts);
  const auto noisy = noisy_chain_tokens(chain, states, m, ts, 1e-12, 1.0, rng);
  EXPECT_EQ(noisy, chain.token_ids);
  const auto noisy2 = noisy_chain_tokens(chain, states, m, ts, 0.05, 1.0, rng);
  EXPECT_EQ(noisy2[0], kInvalidToken);
  EXPECT_EQ(noisy2.size(), chain.token_ids.size());
}

TEST(TemplateSetJson, RoundTripIsByteStable) {
  FitStats st;
  st.expected_error = 0.0123;
  st.class_error = {0.01, 0.02, 0.03};
  st.class_count = {10, 20, 30};
  st.restarts = 4;
  st.chosen_restart = 2;
  TemplateSet ts({{0.1, 0.2, 0.3}, {-1.0 / 3.0, 1e-17, -0.1}}, VocabMethod::kKDisks, 0.035, 77, st);
  const auto text = ts.to_json();
  const auto back = TemplateSet::from_json(text);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1], ts[1]);
  EXPECT_EQ(back.method(), VocabMethod::kKDisks);
  EXPECT_EQ(back.epsilon(), 0.035);
  EXPECT_EQ(back.seed(), 77u);
  EXPECT_EQ(back.fit_stats().chosen_restart, 2u);
  EXPECT_EQ(back.to_json(), text);
}

TEST(TemplateSetJson, RejectsWrongFormat) {
  EXPECT_ANY_THROW(TemplateSet::from_json(R"({"format":"other","version":1})"));
  EXPECT_ANY_THROW(TemplateSet::from_json("not json"));
}

TEST(Sampling, NucleusKeepsSmallestSet) {
  const std::vector<double> p{0.1, 0.5, 0.3, 0.1};
  const auto q = nucleus(p, 0.8);
  EXPECT_DOUBLE_EQ(q[0], 0.0);
  EXPECT_NEAR(q[1], 0.625, 1e-12);
  EXPECT_NEAR(q[2], 0.375, 1e-12);
  EXPECT_DOUBLE_EQ(q[3], 0.0);
  const auto all = nucleus(p, 1.0);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(all[i], p[i], 1e-12);
}
