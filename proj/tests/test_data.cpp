#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "trajeglish/census.hpp"
#include "trajeglish/error.hpp"
#include "trajeglish/synthetic.hpp"

using namespace trajeglish;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("trajeglish_test_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SynthConfig small_cfg(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_scenarios = 12;
  cfg.horizon = 20;
  cfg.seed = seed;
  cfg.missing_rate = 0.2;
  return cfg;
}

}  // namespace

TEST(ScenarioIo, GoldenFixture) {
  const auto corpus = read_scenarios(std::filesystem::path(TRAJEGLISH_TEST_DATA) / "two_agents.jsonl");
  ASSERT_EQ(corpus.size(), 1u);
  const auto& sc = corpus[0];
  EXPECT_EQ(sc.id, "fixture-0");
  EXPECT_EQ(sc.tick, 0.1);
  ASSERT_EQ(sc.map.size(), 2u);
  EXPECT_EQ(sc.map[0].type, MapObjectType::kLane);
  EXPECT_EQ(sc.map[0].points.size(), 3u);
  EXPECT_EQ(sc.map[1].type, MapObjectType::kCrosswalk);
  ASSERT_EQ(sc.agents.size(), 2u);
  EXPECT_EQ(sc.agents[0].id, 7);
  EXPECT_TRUE(sc.agents[0].sdc);
  EXPECT_EQ(sc.agents[0].meta, AgentMeta(4.5, 2.0, AgentClass::kVehicle));
  EXPECT_EQ(sc.agents[0].states[2], AgentState::make(2.0, 0.1, 0.05));
  EXPECT_EQ(sc.agents[1].meta.cls(), AgentClass::kPedestrian);
  EXPECT_FALSE(sc.agents[1].states[1].valid);
  EXPECT_EQ(sc.sdc_index(), 0u);
  EXPECT_EQ(sc.num_steps(), 3u);
}

TEST(ScenarioIo, JsonlRoundTrip) {
  const auto corpus = generate_synthetic(small_cfg(1));
  const auto p = temp_path("rt.jsonl");
  write_scenarios(p, corpus);
  const auto back = read_scenarios(p);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_TRUE(structurally_equal(corpus[i], back[i]));
  std::filesystem::remove(p);
}

TEST(ScenarioIo, BinaryRoundTrip) {
  const auto corpus = generate_synthetic(small_cfg(2));
  const auto p = temp_path("rt.tgsb");
  write_scenarios(p, corpus);
  const auto back = read_scenarios(p);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_TRUE(structurally_equal(corpus[i], back[i]));
  std::filesystem::remove(p);
}

TEST(ScenarioIo, TruncatedJsonlFails) {
  const auto text = slurp(std::filesystem::path(TRAJEGLISH_TEST_DATA) / "two_agents.jsonl");
  try {
    parse_scenarios_jsonl(text.substr(0, text.size() / 2));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
  }
}

TEST(ScenarioIo, TruncatedBinaryFails) {
  const auto corpus = generate_synthetic(small_cfg(3));
  const auto p = temp_path("trunc.tgsb");
  write_scenarios(p, corpus);
  const auto bytes = slurp(p);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
  }
  EXPECT_THROW(read_scenarios(p), DataError);
  std::filesystem::remove(p);
}

TEST(ScenarioIo, UnknownFieldRejected) {
  auto text = slurp(std::filesystem::path(TRAJEGLISH_TEST_DATA) / "two_agents.jsonl");
  text.insert(1, "\"extra\":1,");
  EXPECT_THROW(parse_scenarios_jsonl(text), DataError);
}

TEST(ScenarioIo, WrongVersionRejected) {
  auto text = slurp(std::filesystem::path(TRAJEGLISH_TEST_DATA) / "two_agents.jsonl");
  text.replace(text.find("\"version\":1"), 11, "\"version\":9");
  EXPECT_THROW(parse_scenarios_jsonl(text), DataError);
}

TEST(ScenarioIo, ValidateRequiresOneSdc) {
  auto corpus = read_scenarios(std::filesystem::path(TRAJEGLISH_TEST_DATA) / "two_agents.jsonl");
  corpus[0].agents[1].sdc = true;
  EXPECT_THROW(corpus[0].validate(), DataError);
}

TEST(Split, DisjointAndDeterministic) {
  SynthConfig cfg = small_cfg(4);
  cfg.n_scenarios = 60;
  const auto corpus = generate_synthetic(cfg);
  const auto a = split_corpus(corpus, 0.2, 11);
  const auto b = split_corpus(corpus, 0.2, 11);
  EXPECT_EQ(a.train.size() + a.val.size(), corpus.size());
  std::set<std::string> ids;
  for (const auto& s : a.train) ids.insert(s.id);
  for (const auto& s : a.val) EXPECT_EQ(ids.count(s.id), 0u);
  ASSERT_EQ(a.val.size(), b.val.size());
  for (std::size_t i = 0; i < a.val.size(); ++i) EXPECT_EQ(a.val[i].id, b.val[i].id);
  EXPECT_GT(a.val.size(), 0u);
}

TEST(Synthetic, SameSeedSameCorpus) {
  const auto a = generate_synthetic(small_cfg(5));
  const auto b = generate_synthetic(small_cfg(5));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(structurally_equal(a[i], b[i]));
  SynthConfig par = small_cfg(5);
  par.workers = 3;
  const auto c = generate_synthetic(par);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(structurally_equal(a[i], c[i]));
}

TEST(Synthetic, ZeroNoiseLaneFollowHasConstantSpeed) {
  SynthConfig cfg;
  cfg.n_scenarios = 5;
  cfg.horizon = 30;
  cfg.mix = {1, 0, 0, 0, 0, 0};
  cfg.noise = {0, 0, 0, 0, 0};
  cfg.seed = 6;
  for (const auto& sc : generate_synthetic(cfg)) {
    sc.validate();
    for (const auto& a : sc.agents) {
      std::vector<double> speeds;
      for (std::size_t t = 1; t < a.states.size(); ++t) {
        speeds.push_back(std::hypot(a.states[t].x - a.states[t - 1].x, a.states[t].y - a.states[t - 1].y));
      }
      for (double v : speeds) EXPECT_NEAR(v, speeds.front(), 1e-3 * std::max(1.0, speeds.front()));
    }
  }
}

TEST(Synthetic, KinematicBoundsHold) {
  SynthConfig cfg;
  cfg.n_scenarios = 40;
  cfg.seed = 7;
  for (const auto& sc : generate_synthetic(cfg)) {
    sc.validate();
    EXPECT_FALSE(sc.map.empty());
    for (const auto& a : sc.agents) {
      const auto kb = kinematic_bounds(a.meta.cls());
      for (std::size_t t = 1; t < a.states.size(); ++t) {
        const auto& p = a.states[t - 1];
        const auto& q = a.states[t];
        if (!p.valid || !q.valid) continue;
        EXPECT_LE(std::hypot(q.x - p.x, q.y - p.y) / sc.tick, kb.max_speed + 1e-9);
        EXPECT_LE(std::abs(wrap_angle(q.h - p.h)) / sc.tick, kb.max_yaw_rate + 1e-9);
      }
    }
  }
}

TEST(Census, CountsTransitions) {
  Scenario sc;
  sc.id = "c";
  ScenarioAgent a{0, AgentMeta(4, 2), {}, true};
  for (int t = 0; t < 100; ++t) a.states.push_back(AgentState::make(0.5 * t, 0, 0));
  sc.agents.push_back(a);
  const auto c = token_census({sc});
  EXPECT_EQ(c.total_tokens, 99u);
  EXPECT_EQ(c.moving_tokens, 99u);
}

TEST(Census, StationaryCorpusHasNoMovingTokens) {
  Scenario sc;
  sc.id = "c";
  for (int i = 0; i < 3; ++i) {
    ScenarioAgent a{i, AgentMeta(4, 2), std::vector<AgentState>(20, AgentState::make(3.0 * i, 0, 0)), i == 0};
    sc.agents.push_back(a);
  }
  const auto c = token_census({sc});
  EXPECT_EQ(c.total_tokens, 57u);
  EXPECT_EQ(c.moving_tokens, 0u);
}

TEST(Census, WomdRate) {
  // 486,995 scenarios of 91 steps at 10 Hz and 1.5e9 tokens.
  const double rate = tokens_per_hour(1.5e9, 486995.0 * 91, 0.1);
  EXPECT_NEAR(rate / 1e6, 1.2, 0.05);
}
