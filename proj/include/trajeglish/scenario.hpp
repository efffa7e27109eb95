#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "trajeglish/geometry.hpp"

namespace trajeglish {

inline constexpr int kScenarioFormatVersion = 1;
inline constexpr double kDefaultTick = 0.1;  // seconds, 10 Hz

enum class MapObjectType : std::uint8_t { kLane = 0, kRoadEdge = 1, kCrosswalk = 2, kSidewalk = 3 };
inline constexpr std::size_t kNumMapObjectTypes = 4;

std::string_view to_string(MapObjectType t);
MapObjectType map_object_type_from_string(std::string_view s);

struct MapObject {
  MapObjectType type = MapObjectType::kLane;
  std::vector<Vec2> points;
};

struct ScenarioAgent {
  std::int64_t id = 0;
  AgentMeta meta;
  std::vector<AgentState> states;
  bool sdc = false;
};

/// One driving scene: typed map polylines plus an N x T grid of agent states.
struct Scenario {
  std::string id;
  double tick = kDefaultTick;
  std::vector<MapObject> map;
  std::vector<ScenarioAgent> agents;

  std::size_t num_agents() const { return agents.size(); }
  std::size_t num_steps() const { return agents.empty() ? 0 : agents.front().states.size(); }
  std::size_t sdc_index() const;

  // Throws DataError unless the grid is rectangular and exactly one agent is the sdc.
  void validate() const;
};

bool structurally_equal(const Scenario& a, const Scenario& b);

using Corpus = std::vector<Scenario>;

// Line-delimited JSON, one scenario per line.
void write_scenarios_jsonl(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_scenarios_jsonl(const std::filesystem::path& path);
Corpus parse_scenarios_jsonl(std::string_view text);
std::string scenario_to_json_line(const Scenario& s);

// Packed little-endian binary variant.
void write_scenarios_binary(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_scenarios_binary(const std::filesystem::path& path);

// Dispatches on the file's leading magic bytes.
Corpus read_scenarios(const std::filesystem::path& path);
void write_scenarios(const std::filesystem::path& path, const Corpus& corpus);

// Deterministic split by scenario id hash; disjoint by construction.
struct CorpusSplit {
  Corpus train;
  Corpus val;
};
CorpusSplit split_corpus(const Corpus& corpus, double val_fraction, std::uint64_t seed);

}  // namespace trajeglish
