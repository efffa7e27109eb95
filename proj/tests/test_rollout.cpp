#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "model_fixtures.hpp"
#include "trajeglish/discretization.hpp"
#include "trajeglish/error.hpp"
#include "trajeglish/evaluation.hpp"
#include "trajeglish/rollout.hpp"
#include "trajeglish/synthetic.hpp"
#include "trajeglish/training.hpp"
#include "trajeglish/windowing.hpp"

using namespace trajeglish;
using namespace trajeglish::testing;

namespace {

constexpr int kVocab = 24;

ConstantVelocityConfig cv(std::size_t agents, std::size_t horizon = 12) {
  ConstantVelocityConfig c;
  c.n_scenarios = 6;
  c.agents_per_scene = agents;
  c.horizon = horizon;
  c.n_speeds = 4;
  return c;
}

Model random_model(MaskingRegime regime = MaskingRegime::kFullIntra, int max_agents = 4, int max_t = 8) {
  ModelConfig m = micro_config(regime);
  m.vocab_size = kVocab;
  m.max_agents = max_agents;
  m.max_timesteps = max_t;
  Model model(m, 21);
  Rng rng(22);
  scramble(model.params(), rng, 0.3);
  return model;
}

RolloutConfig rcfg(std::size_t horizon, std::uint64_t seed = 1) {
  RolloutConfig r;
  r.horizon = horizon;
  r.seed = seed;
  r.n_rollouts = 2;
  return r;
}

}  // namespace

TEST(SampleToken, TinyNucleusIsArgmax) {
  Eigen::VectorXd l(5);
  l << 0.1, 2.0, 1.9, -1.0, 0.0;
  Rng rng(1);
  for (int k = 0; k < 200; ++k) EXPECT_EQ(sample_token(l, 1.0, 1e-9, rng), 1);
}

TEST(SampleToken, FrequenciesMatchSoftmax) {
  Eigen::VectorXd l(4);
  l << 0.5, -0.2, 1.0, 0.0;
  const Eigen::ArrayXd p = l.array().exp() / l.array().exp().sum();
  Rng rng(2);
  const int n = 100000;
  std::vector<int> hist(4, 0);
  for (int k = 0; k < n; ++k) ++hist[static_cast<std::size_t>(sample_token(l, 1.0, 1.0, rng))];
  double chi2 = 0;
  for (int k = 0; k < 4; ++k) {
    const double e = n * p(k);
    chi2 += (hist[static_cast<std::size_t>(k)] - e) * (hist[static_cast<std::size_t>(k)] - e) / e;
  }
  EXPECT_LT(chi2, 11.34);  // chi-square, 3 dof, p = 0.01
}

TEST(SampleToken, TemperatureFlattens) {
  Eigen::VectorXd l(3);
  l << 2.0, 1.0, -1.0;
  auto ratio = [&](double tau) {
    Rng rng(3);
    int a = 0, b = 0;
    for (int k = 0; k < 50000; ++k) {
      const int t = sample_token(l, tau, 1.0, rng);
      a += t == 0;
      b += t == 1;
    }
    return static_cast<double>(a) / b;
  };
  EXPECT_LT(std::abs(ratio(1.5) - 1.0), std::abs(ratio(1.0) - 1.0));
}

TEST(RolloutConfig, Validation) {
  RolloutConfig r = rcfg(10);
  r.window.recompute_timesteps = {3, 3};
  EXPECT_THROW(r.validate(), ConfigError);
  r.window.recompute_timesteps = {3, 12};
  EXPECT_THROW(r.validate(), ConfigError);
  r.window.recompute_timesteps = {3, 7};
  EXPECT_EQ(RolloutConfig::from_json(r.to_json()).to_json(), r.to_json());
  EXPECT_THROW(RolloutConfig::from_json({{"temperature", 0.0}}), ConfigError);
  EXPECT_THROW(RolloutConfig::from_json({{"horizn", 3}}), ConfigError);
}

TEST(Rollout, AllReplayReproducesChainTokenization) {
  const auto c = cv(3);
  const auto corpus = generate_synthetic([] {
    SynthConfig s;
    s.n_scenarios = 3;
    s.agents_per_scene = 4;
    s.horizon = 12;
    s.missing_rate = 0.5;
    return s;
  }());
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model();
  for (const auto& sc : corpus) {
    for (std::size_t t0 : {std::size_t{0}, std::size_t{3}}) {
      const auto rs = rollout(model, ts, sc, t0, ControlAssignment::all(sc.agents.size(), Controller::kReplay),
                              rcfg(12 - t0));
      for (const auto& r : rs) {
        for (std::size_t a = 0; a < r.agents.size(); ++a) {
          const auto& states = sc.agents[r.agents[a]].states;
          const std::vector<AgentState> tail(states.begin() + static_cast<std::ptrdiff_t>(t0), states.end());
          const auto chain = tokenize_trajectory(tail, sc.agents[r.agents[a]].meta, ts);
          for (std::size_t k = 0; k + 1 < tail.size(); ++k) {
            EXPECT_EQ(r.tokens.at(static_cast<int>(a), static_cast<int>(k)), chain.token_ids[k + 1]);
            EXPECT_EQ(r.states[a][k + 1], chain.snapped_states[k + 1]);
            EXPECT_TRUE(std::isnan(r.log_probs[a][k]));
          }
        }
        EXPECT_EQ(r.total_log_prob, 0.0);
      }
    }
  }
}

TEST(Rollout, HorizonZeroKeepsInitialization) {
  const auto c = cv(3);
  const auto corpus = generate_constant_velocity(c);
  const auto r = rollout(random_model(), constant_velocity_templates(c, kVocab), corpus[0], 0,
                         ControlAssignment::all(3, Controller::kModel), rcfg(0))[0];
  EXPECT_EQ(r.tokens.n_steps, 0);
  for (std::size_t a = 0; a < r.agents.size(); ++a) {
    ASSERT_EQ(r.states[a].size(), 1u);
    EXPECT_EQ(r.states[a][0], corpus[0].agents[r.agents[a]].states[0]);
  }
}

TEST(Rollout, SeededDeterminism) {
  const auto c = cv(4);
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model();
  auto run = [&](std::uint64_t seed, std::size_t workers) {
    auto r = rcfg(8, seed);
    r.workers = workers;
    return rollout(model, ts, corpus[1], 0, ControlAssignment::all(4, Controller::kModel), r);
  };
  const auto a = run(5, 1), b = run(5, 2), d = run(6, 1);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].tokens, b[k].tokens);
    EXPECT_EQ(a[k].states, b[k].states);
  }
  EXPECT_NE(a[0].tokens, a[1].tokens);
  EXPECT_NE(a[0].tokens, d[0].tokens);
}

TEST(Rollout, LogProbsMatchTeacherForcing) {
  const auto c = cv(4);
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  for (auto regime : {MaskingRegime::kFullIntra, MaskingRegime::kNoIntra, MaskingRegime::kMarginal}) {
    const Model model = random_model(regime);
    auto control = ControlAssignment::all(4, Controller::kModel);
    control.controllers[2] = Controller::kReplay;
    auto cfg = rcfg(8, 9);
    cfg.temperature = 1.5;
    cfg.p_top = 0.9;
    cfg.n_rollouts = 5;
    for (const auto& r : rollout(model, ts, corpus[2], 0, control, cfg)) {
      EXPECT_NEAR(r.total_log_prob, teacher_forced_log_prob(model, corpus[2], r), 1e-6);
    }
  }
}

TEST(Rollout, SingleAgentOrderIrrelevant) {
  const auto c = cv(1);
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model();
  const auto a = rollout(model, ts, corpus[0], 0, ControlAssignment::all(1, Controller::kModel), rcfg(6), {0});
  const auto b = rollout(model, ts, corpus[0], 0, ControlAssignment::all(1, Controller::kModel), rcfg(6), {});
  EXPECT_EQ(a[0].tokens, b[0].tokens);
}

TEST(Rollout, ExternalPolicyActsFirstAndIsTokenized) {
  const auto c = cv(3);
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model();
  auto control = ControlAssignment::all(3, Controller::kModel);
  control.controllers[0] = Controller::kExternal;
  control.policies.resize(3);
  control.policies[0] = [&](std::size_t, std::size_t step, const StateGrid& hist) {
    EXPECT_EQ(hist[0].size(), step);  // history covers steps t0 .. step-1 with t0 = 0
    return corpus[0].agents[0].states[step];
  };
  const auto r = rollout(model, ts, corpus[0], 0, control, rcfg(5), {0, 1, 2})[0];
  for (int k = 0; k < 5; ++k) EXPECT_EQ(r.tokens.at(0, k), r.tokens.at(0, 0));
  EXPECT_THROW(rollout(model, ts, corpus[0], 0, control, rcfg(5), {1, 0, 2}), ConfigError);
}

TEST(Rollout, ReplayBeyondLogIsDataError) {
  const auto c = cv(2, 4);
  const auto corpus = generate_constant_velocity(c);
  EXPECT_THROW(rollout(random_model(), constant_velocity_templates(c, kVocab), corpus[0], 0,
                       ControlAssignment::all(2, Controller::kReplay), rcfg(6)),
               DataError);
}

TEST(Rollout, LongHorizonRebuildsDecoder) {
  const auto c = cv(3, 30);
  const auto corpus = generate_constant_velocity(c);
  const auto r = rollout(random_model(), constant_velocity_templates(c, kVocab), corpus[0], 0,
                         ControlAssignment::all(3, Controller::kModel), rcfg(20))[0];
  EXPECT_GT(r.schedule.size(), 1u);
  for (int a = 0; a < 3; ++a) {
    for (int k = 0; k < 20; ++k) EXPECT_GE(r.tokens.at(a, k), 0);
  }
}

namespace {

// Independent checker for the window constraints.
void check_windows(const std::vector<AgentState>& pos, std::size_t max_agents, std::size_t first,
                   const std::vector<AgentWindow>& ws) {
  ASSERT_FALSE(ws.empty());
  EXPECT_EQ(ws[0].center, first);
  EXPECT_EQ(ws[0].agents[0], first);
  std::vector<int> acted_at(pos.size(), -1);
  int counter = 0;
  for (const auto& w : ws) {
    ASSERT_LE(w.agents.size(), max_agents);
    // Members are the nearest agents to the center.
    std::vector<double> d;
    for (std::size_t i = 0; i < pos.size(); ++i) d.push_back(std::hypot(pos[i].x - pos[w.center].x, pos[i].y - pos[w.center].y));
    std::set<std::size_t> members(w.agents.begin(), w.agents.end());
    ASSERT_EQ(members.size(), w.agents.size());
    EXPECT_TRUE(members.count(w.center));
    double max_in = 0, min_out = INFINITY;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (members.count(i)) {
        max_in = std::max(max_in, d[i]);
      } else {
        min_out = std::min(min_out, d[i]);
      }
    }
    EXPECT_LE(max_in, min_out);
    EXPECT_EQ(w.agents.size(), std::min(max_agents, pos.size()));
    // Acted prefix, in earlier acting order, then the rest by distance.
    for (std::size_t s = 0; s < w.agents.size(); ++s) {
      const std::size_t a = w.agents[s];
      if (s < w.n_acted) {
        EXPECT_GE(acted_at[a], 0);
        if (s > 0) EXPECT_LT(acted_at[w.agents[s - 1]], acted_at[a]);
      } else {
        EXPECT_EQ(acted_at[a], -1);
        if (s > w.n_acted) EXPECT_LE(d[w.agents[s - 1]], d[a]);
      }
    }
    EXPECT_EQ(acted_at[w.center], -1);
    if (&w != &ws.front()) {
      // Greedy choice: no uncovered agent's window overlaps the covered set more.
      auto overlap = [&](std::size_t u) {
        std::vector<std::pair<double, std::size_t>> byd;
        for (std::size_t i = 0; i < pos.size(); ++i) {
          byd.emplace_back(i == u ? -1.0 : std::hypot(pos[i].x - pos[u].x, pos[i].y - pos[u].y), i);
        }
        std::sort(byd.begin(), byd.end());
        std::size_t n = 0;
        for (std::size_t k = 0; k < std::min(max_agents, byd.size()); ++k) n += acted_at[byd[k].second] >= 0;
        return n;
      };
      const std::size_t mine = overlap(w.center);
      for (std::size_t u = 0; u < pos.size(); ++u) {
        if (acted_at[u] < 0) EXPECT_LE(overlap(u), mine);
      }
    }
    for (std::size_t s = w.n_acted; s < w.agents.size(); ++s) acted_at[w.agents[s]] = counter++;
  }
  for (int v : acted_at) EXPECT_GE(v, 0);
}

}  // namespace

TEST(Windows, RandomScattersSatisfyConstraints) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<AgentState> pos;
    for (int i = 0; i < 50; ++i) pos.push_back(AgentState::make(rng.uniform(-100, 100), rng.uniform(-100, 100), 0));
    const std::size_t first = rng.index(50);
    check_windows(pos, 24, first, select_windows(pos, 24, first));
  }
}

TEST(Windows, SmallSceneIsOneWindow) {
  std::vector<AgentState> pos = {AgentState::make(0, 0, 0), AgentState::make(5, 0, 0), AgentState::make(-3, 0, 0)};
  const auto ws = select_windows(pos, 4, 1);
  ASSERT_EQ(ws.size(), 1u);
  EXPECT_EQ(ws[0].agents, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(Windows, TwoDistantClusters) {
  std::vector<AgentState> pos;
  for (int i = 0; i < 4; ++i) pos.push_back(AgentState::make(i, 0, 0));
  for (int i = 0; i < 4; ++i) pos.push_back(AgentState::make(1000 + i, 0, 0));
  const auto ws = select_windows(pos, 4, 0);
  ASSERT_EQ(ws.size(), 2u);
  EXPECT_EQ(ws[1].n_acted, 0u);
}

TEST(WindowedRollout, SmallSceneMatchesPlain) {
  const auto c = cv(4);
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model();
  auto plain = rcfg(10);
  auto windowed = plain;
  windowed.window.recompute_timesteps = {2, 5, 9};
  const auto a = rollout(model, ts, corpus[0], 0, ControlAssignment::all(4, Controller::kModel), plain);
  const auto b = rollout(model, ts, corpus[0], 0, ControlAssignment::all(4, Controller::kModel), windowed);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].tokens, b[k].tokens);
    EXPECT_EQ(a[k].states, b[k].states);
  }
}

TEST(WindowedRollout, FortyAgentsEightySteps) {
  ConstantVelocityConfig c = cv(40, 80);
  c.n_scenarios = 1;
  const auto corpus = generate_constant_velocity(c);
  const auto ts = constant_velocity_templates(c, kVocab);
  const Model model = random_model(MaskingRegime::kFullIntra, 4, 8);
  auto cfg = rcfg(80);
  cfg.n_rollouts = 1;
  cfg.context_steps = 4;
  cfg.window.recompute_timesteps = {10, 34, 58};
  const auto r = rollout(model, ts, corpus[0], 0, ControlAssignment::all(40, Controller::kModel), cfg)[0];
  ASSERT_EQ(r.agents.size(), 40u);
  for (int a = 0; a < 40; ++a) {
    for (int k = 0; k < 80; ++k) EXPECT_GE(r.tokens.at(a, k), 0);
  }
  std::set<std::size_t> steps;
  for (const auto& rec : r.schedule) {
    steps.insert(rec.step);
    std::vector<AgentState> pos;
    for (const auto& row : r.states) pos.push_back(row[rec.init_step]);
    check_windows(pos, 4, 0, rec.windows);
  }
  for (std::size_t s : {0, 10, 34, 58}) EXPECT_TRUE(steps.count(s)) << s;
}

TEST(NllEval, ContextZeroSingleAgentIsFirstTokenNll) {
  const auto c = cv(1, 10);
  TokenizedCorpus data(generate_constant_velocity(c), constant_velocity_templates(c, kVocab));
  const Model model = random_model();
  NllEvalOptions o;
  o.n_steps = 6;
  o.context_limit = 0;
  const auto table = nll_eval(model, data, o);
  double sum = 0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& a = data.scenarios()[s].agents[0];
    // Initial state at step 5, first token moves it to step 6.
    SceneInit init = rollout_scene_init(data.scenarios()[s], {a.states[5]}, {0}, 0, 8);
    TokenGrid g(1, 1);
    g.at(0, 0) = data.chains(s)[0].token_ids[6];
    sum -= token_log_probs(model.logits(g, init), g)[0];
  }
  EXPECT_NEAR(table.mean, sum / static_cast<double>(data.size()), 1e-9);
}

TEST(NllEval, MarginalFlatOverIntraOrder) {
  const auto c = cv(4, 10);
  TokenizedCorpus data(generate_constant_velocity(c), constant_velocity_templates(c, kVocab));
  const Model model = random_model(MaskingRegime::kMarginal);
  NllSweepOptions o;
  o.n_steps = 6;
  o.contexts = {0, 2, 5};
  const auto rep = nll_sweeps(model, data, o);
  const auto& pred = rep.get_curve("nll_predecessors");
  for (double y : pred.y) EXPECT_NEAR(y, pred.y[0], 1e-6);
  EXPECT_NEAR(rep.get_curve("nll_context_delta").y.back(), 0.0, 1e-12);
}
