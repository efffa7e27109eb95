#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "model_fixtures.hpp"
#include "trajeglish/checkpoint.hpp"
#include "trajeglish/error.hpp"
#include "trajeglish/synthetic.hpp"
#include "trajeglish/training.hpp"

using namespace trajeglish;
using namespace trajeglish::testing;

namespace {

ConstantVelocityConfig cv_config() {
  ConstantVelocityConfig c;
  c.n_scenarios = 32;
  c.agents_per_scene = 3;
  c.horizon = 8;
  c.n_speeds = 4;
  return c;
}

ModelConfig tiny_model(int vocab) {
  ModelConfig m = micro_config(MaskingRegime::kFullIntra);
  m.vocab_size = vocab;
  m.hidden_dim = 16;
  m.n_heads = 2;
  m.max_timesteps = 8;
  return m;
}

TrainConfig quick_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 4;
  t.optim.lr = 3e-3;
  t.optim.warmup_steps = 5;
  t.optim.total_steps = steps;
  t.examples.n_steps = 8;
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("trajeglish_test_" + name);
}

}  // namespace

TEST(ConstantVelocity, TokensAreExactAndConstant) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  for (std::size_t s = 0; s < data.size(); ++s) {
    for (const auto& chain : data.chains(s)) {
      for (std::size_t t = 2; t < chain.token_ids.size(); ++t) EXPECT_EQ(chain.token_ids[t], chain.token_ids[1]);
      EXPECT_LT(static_cast<std::size_t>(chain.token_ids[1]), cfg.n_speeds);
      for (std::size_t t = 1; t < chain.error_per_step.size(); ++t) EXPECT_LT(chain.error_per_step[t], 1e-9);
    }
  }
}

TEST(Examples, NearestAgentsCenterFirst) {
  const auto cfg = cv_config();
  const auto corpus = generate_constant_velocity(cfg);
  const auto order = nearest_agents(corpus[0], 0, 1, 2);
  ASSERT_EQ(order.size(), 2u);
  EXPECT_EQ(order[0], 1u);
}

TEST(Examples, DeterministicWindowAndFrame) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  ExampleOptions opts;
  opts.random_crop = opts.random_frame = opts.random_order = false;
  opts.n_steps = 4;
  Rng rng(0);
  const auto ex = make_example(data, 0, tiny_model(24), opts, rng);
  ASSERT_TRUE(ex.has_value());
  EXPECT_EQ(ex->t0, 0u);
  EXPECT_EQ(ex->agents.front(), data.scenarios()[0].sdc_index());
  // The frame agent sits at the origin facing +x.
  EXPECT_NEAR(ex->init.agents[0].init.x, 0.0, 1e-12);
  EXPECT_NEAR(ex->init.agents[0].init.h, 0.0, 1e-12);
  EXPECT_EQ(ex->inputs, ex->targets);
  EXPECT_EQ(ex->targets.n_steps, 4);
}

TEST(Examples, NoisyInputsDifferButTargetsDoNot) {
  SynthConfig sc;
  sc.n_scenarios = 4;
  sc.horizon = 12;
  const auto corpus = generate_synthetic(sc);
  const auto cfg = cv_config();
  TokenizedCorpus data(corpus, constant_velocity_templates(cfg, 24));
  ExampleOptions clean, noisy;
  clean.n_steps = noisy.n_steps = 8;
  noisy.noisy.enabled = true;
  noisy.noisy.sigma = 0.5;
  noisy.noisy.p_top = 1.0;
  ModelConfig m = tiny_model(24);
  Rng r1(3), r2(3);
  const auto a = make_example(data, 1, m, clean, r1);
  const auto b = make_example(data, 1, m, noisy, r2);
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->targets, b->targets);
  EXPECT_NE(b->inputs, b->targets);
}

TEST(TrainConfig, JsonRoundTripAndDefaults) {
  auto t = quick_train(10);
  t.examples.noisy.enabled = true;
  EXPECT_EQ(TrainConfig::from_json(t.to_json()).to_json(), t.to_json());
  const auto d = TrainConfig::from_json({{"steps", 77}});
  EXPECT_EQ(d.optim.total_steps, 77u);
  EXPECT_THROW(TrainConfig::from_json({{"step", 1}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"optim", {{"lr", -1.0}}}}), ConfigError);
}

TEST(Train, FirstLossNearLogV) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 64));
  Model model(tiny_model(64), 1);
  const auto res = train(model, data, quick_train(1));
  EXPECT_NEAR(res.log[0].loss / std::log(64.0), 1.0, 0.05);
}

TEST(Train, LossDropsOnConstantVelocity) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  Model model(tiny_model(24), 2);
  const auto res = train(model, data, quick_train(120));
  EXPECT_LT(res.log.back().loss, 0.5 * res.log.front().loss);
  EXPECT_EQ(res.log.back().tokens_seen, res.tokens_seen);
}

TEST(Train, DeterministicAcrossRunsAndWorkers) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  auto run = [&](std::size_t workers) {
    Model model(tiny_model(24), 3);
    auto t = quick_train(6);
    t.workers = workers;
    t.examples.noisy.enabled = true;
    const auto res = train(model, data, t);
    std::string s;
    for (const auto& e : res.log) s += e.to_json().dump() + "\n";
    return s;
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_EQ(a, run(3));
}

TEST(Train, NonFiniteAborts) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  Model model(tiny_model(24), 4);
  model.params()[0].value(0, 0) = std::nan("");
  EXPECT_THROW(train(model, data, quick_train(2)), NumericError);
}

TEST(Train, VocabMismatchIsConfigError) {
  const auto cfg = cv_config();
  TokenizedCorpus data(generate_constant_velocity(cfg), constant_velocity_templates(cfg, 24));
  Model model(tiny_model(32), 5);
  EXPECT_THROW(train(model, data, quick_train(1)), ConfigError);
}

TEST(Train, LogIsLineDelimitedJson) {
  const auto path = temp_path("log.jsonl");
  std::filesystem::remove(path);
  write_train_log(path, {{0, 1.5, 1e-3, 10, 0.2}, {1, 1.25, 2e-3, 20, 0.1}});
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), n);
    EXPECT_TRUE(j.contains("loss") && j.contains("lr") && j.contains("tokens_seen"));
    ++n;
  }
  EXPECT_EQ(n, 2);
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(6);
  Model model(micro_config(MaskingRegime::kNoIntra), 7);
  scramble(model.params(), rng);
  const auto path = temp_path("model.tgck");
  save_checkpoint(path, model, {{"step", 12}});
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.meta.at("step").get<int>(), 12);
  EXPECT_EQ(ck.model.config().to_json(), model.config().to_json());
  ASSERT_EQ(ck.model.params().size(), model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(ck.model.params()[i].name, model.params()[i].name);
    EXPECT_EQ(ck.model.params()[i].decay, model.params()[i].decay);
    EXPECT_TRUE(ck.model.params()[i].value == model.params()[i].value);
  }
  const auto init = random_scene(rng, 2, 2);
  const auto tok = random_tokens(rng, 2, 3, 12);
  EXPECT_TRUE(ck.model.logits(tok, init) == model.logits(tok, init));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = temp_path("bad.tgck");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  Model model(micro_config(MaskingRegime::kFullIntra), 8);
  save_checkpoint(path, model);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
  EXPECT_THROW(load_checkpoint(path), DataError);
}
