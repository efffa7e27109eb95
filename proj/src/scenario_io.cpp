#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "trajeglish/error.hpp"
#include "trajeglish/random.hpp"
#include "trajeglish/scenario.hpp"

namespace trajeglish {

using nlohmann::json;

std::string_view to_string(MapObjectType t) {
  switch (t) {
    case MapObjectType::kLane: return "lane";
    case MapObjectType::kRoadEdge: return "road_edge";
    case MapObjectType::kCrosswalk: return "crosswalk";
    case MapObjectType::kSidewalk: return "sidewalk";
  }
  return "lane";
}

MapObjectType map_object_type_from_string(std::string_view s) {
  if (s == "lane") return MapObjectType::kLane;
  if (s == "road_edge") return MapObjectType::kRoadEdge;
  if (s == "crosswalk") return MapObjectType::kCrosswalk;
  if (s == "sidewalk") return MapObjectType::kSidewalk;
  throw DataError("unknown map object type '" + std::string(s) + "'");
}

std::size_t Scenario::sdc_index() const {
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i].sdc) return i;
  }
  throw DataError("scenario " + id + " has no sdc agent");
}

void Scenario::validate() const {
  if (!(tick > 0.0)) throw DataError("scenario " + id + ": tick must be positive");
  const std::size_t t = num_steps();
  std::size_t n_sdc = 0;
  for (const auto& a : agents) {
    if (a.states.size() != t) throw DataError("scenario " + id + ": state grid is not rectangular");
    n_sdc += a.sdc ? 1 : 0;
  }
  if (!agents.empty() && n_sdc != 1) {
    throw DataError("scenario " + id + ": expected exactly one sdc agent, found " +
                    std::to_string(n_sdc));
  }
}

bool structurally_equal(const Scenario& a, const Scenario& b) {
  if (a.id != b.id || a.tick != b.tick || a.map.size() != b.map.size() ||
      a.agents.size() != b.agents.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.map.size(); ++i) {
    const auto& ma = a.map[i];
    const auto& mb = b.map[i];
    if (ma.type != mb.type || ma.points.size() != mb.points.size()) return false;
    for (std::size_t k = 0; k < ma.points.size(); ++k) {
      if (ma.points[k].x != mb.points[k].x || ma.points[k].y != mb.points[k].y) return false;
    }
  }
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    const auto& x = a.agents[i];
    const auto& y = b.agents[i];
    if (x.id != y.id || !(x.meta == y.meta) || x.sdc != y.sdc || x.states != y.states) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

const std::set<std::string> kScenarioKeys = {"version", "id", "tick", "map", "agents"};
const std::set<std::string> kMapKeys = {"type", "points"};
const std::set<std::string> kAgentKeys = {"id", "class", "length", "width", "sdc", "states"};

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.contains(it.key())) {
      throw DataError(std::string("unsupported field '") + it.key() + "' in " + where +
                      " (format version " + std::to_string(kScenarioFormatVersion) + ")");
    }
  }
}

json to_json(const Scenario& s) {
  json j;
  j["version"] = kScenarioFormatVersion;
  j["id"] = s.id;
  j["tick"] = s.tick;
  json map = json::array();
  for (const auto& m : s.map) {
    json pts = json::array();
    for (const auto& p : m.points) pts.push_back({p.x, p.y});
    map.push_back({{"type", to_string(m.type)}, {"points", std::move(pts)}});
  }
  j["map"] = std::move(map);
  json agents = json::array();
  for (const auto& a : s.agents) {
    json states = json::array();
    for (const auto& st : a.states) {
      if (st.valid) {
        states.push_back({st.x, st.y, st.h});
      } else {
        states.push_back(nullptr);
      }
    }
    agents.push_back({{"id", a.id},
                      {"class", to_string(a.meta.cls())},
                      {"length", a.meta.length()},
                      {"width", a.meta.width()},
                      {"sdc", a.sdc},
                      {"states", std::move(states)}});
  }
  j["agents"] = std::move(agents);
  return j;
}

Scenario from_json(const json& j) {
  if (!j.is_object()) throw DataError("scenario record is not an object");
  reject_unknown(j, kScenarioKeys, "scenario");
  const int version = j.at("version").get<int>();
  if (version != kScenarioFormatVersion) {
    throw DataError("unsupported scenario format version " + std::to_string(version));
  }
  Scenario s;
  s.id = j.at("id").get<std::string>();
  s.tick = j.at("tick").get<double>();
  for (const auto& jm : j.at("map")) {
    reject_unknown(jm, kMapKeys, "map object");
    MapObject m;
    m.type = map_object_type_from_string(jm.at("type").get<std::string>());
    for (const auto& p : jm.at("points")) {
      if (!p.is_array() || p.size() != 2) throw DataError("map point must be [x, y]");
      m.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    s.map.push_back(std::move(m));
  }
  for (const auto& ja : j.at("agents")) {
    reject_unknown(ja, kAgentKeys, "agent");
    ScenarioAgent a{ja.at("id").get<std::int64_t>(),
                    AgentMeta(ja.at("length").get<double>(), ja.at("width").get<double>(),
                              agent_class_from_string(ja.at("class").get<std::string>())),
                    {},
                    ja.at("sdc").get<bool>()};
    for (const auto& st : ja.at("states")) {
      if (st.is_null()) {
        a.states.push_back(AgentState::invalid());
      } else {
        if (!st.is_array() || st.size() != 3) throw DataError("state must be [x, y, h] or null");
        a.states.push_back(
            AgentState{st[0].get<double>(), st[1].get<double>(), st[2].get<double>(), true});
      }
    }
    s.agents.push_back(std::move(a));
  }
  s.validate();
  return s;
}

}  // namespace

std::string scenario_to_json_line(const Scenario& s) { return to_json(s).dump(); }

Corpus parse_scenarios_jsonl(std::string_view text) {
  Corpus out;
  std::size_t offset = 0;
  while (offset < text.size()) {
    std::size_t end = text.find('\n', offset);
    const bool terminated = end != std::string_view::npos;
    if (!terminated) end = text.size();
    std::string_view line = text.substr(offset, end - offset);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) {
      try {
        out.push_back(from_json(json::parse(line)));
      } catch (const json::parse_error& e) {
        throw DataError("scenario parse error at byte offset " +
                        std::to_string(offset + (e.byte > 0 ? e.byte - 1 : 0)) + ": " + e.what());
      } catch (const json::exception& e) {
        throw DataError("scenario record starting at byte offset " + std::to_string(offset) +
                        " is malformed: " + e.what());
      } catch (const DataError& e) {
        throw DataError("scenario record starting at byte offset " + std::to_string(offset) +
                        ": " + e.what());
      } catch (const std::invalid_argument& e) {
        throw DataError("scenario record starting at byte offset " + std::to_string(offset) +
                        ": " + e.what());
      }
    }
    offset = terminated ? end + 1 : end;
  }
  return out;
}

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Corpus read_scenarios_jsonl(const std::filesystem::path& path) {
  return parse_scenarios_jsonl(slurp(path));
}

void write_scenarios_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : corpus) {
    s.validate();
    out << scenario_to_json_line(s) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Packed binary

namespace {

constexpr char kBinaryMagic[4] = {'T', 'G', 'S', 'B'};
constexpr std::uint32_t kBinaryVersion = 1;

static_assert(std::endian::native == std::endian::little, "binary scenario format is little-endian");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw DataError("binary scenario file truncated at byte offset " + std::to_string(pos_));
    }
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_scenarios_binary(const std::filesystem::path& path, const Corpus& corpus) {
  Writer w;
  w.raw(kBinaryMagic, 4);
  w.put<std::uint32_t>(kBinaryVersion);
  w.put<std::uint64_t>(corpus.size());
  for (const auto& s : corpus) {
    s.validate();
    w.put_string(s.id);
    w.put<double>(s.tick);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.map.size()));
    for (const auto& m : s.map) {
      w.put<std::uint8_t>(static_cast<std::uint8_t>(m.type));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(m.points.size()));
      for (const auto& p : m.points) {
        w.put<double>(p.x);
        w.put<double>(p.y);
      }
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.agents.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.num_steps()));
    for (const auto& a : s.agents) {
      w.put<std::int64_t>(a.id);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(a.meta.cls()));
      w.put<double>(a.meta.length());
      w.put<double>(a.meta.width());
      w.put<std::uint8_t>(a.sdc ? 1 : 0);
      for (const auto& st : a.states) {
        w.put<std::uint8_t>(st.valid ? 1 : 0);
        w.put<double>(st.x);
        w.put<double>(st.y);
        w.put<double>(st.h);
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

Corpus read_scenarios_binary(const std::filesystem::path& path) {
  const std::string data = slurp(path);
  Reader r(data);
  if (data.size() < 4 || std::memcmp(data.data(), kBinaryMagic, 4) != 0) {
    throw DataError("not a packed scenario file (bad magic at byte offset 0)");
  }
  r.get<std::uint32_t>();  // magic
  const auto version = r.get<std::uint32_t>();
  if (version != kBinaryVersion) {
    throw DataError("unsupported packed scenario version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  Corpus out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t record_start = r.pos();
    Scenario s;
    s.id = r.get_string();
    s.tick = r.get<double>();
    const auto n_map = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < n_map; ++k) {
      MapObject m;
      const auto type = r.get<std::uint8_t>();
      if (type >= kNumMapObjectTypes) {
        throw DataError("bad map object type at byte offset " + std::to_string(r.pos() - 1));
      }
      m.type = static_cast<MapObjectType>(type);
      const auto n_pts = r.get<std::uint32_t>();
      for (std::uint32_t p = 0; p < n_pts; ++p) {
        const double x = r.get<double>();
        const double y = r.get<double>();
        m.points.push_back({x, y});
      }
      s.map.push_back(std::move(m));
    }
    const auto n_agents = r.get<std::uint32_t>();
    const auto n_steps = r.get<std::uint32_t>();
    for (std::uint32_t a = 0; a < n_agents; ++a) {
      const auto id = r.get<std::int64_t>();
      const auto cls = r.get<std::uint8_t>();
      if (cls >= kNumAgentClasses) {
        throw DataError("bad agent class at byte offset " + std::to_string(r.pos() - 1));
      }
      const double length = r.get<double>();
      const double width = r.get<double>();
      const bool sdc = r.get<std::uint8_t>() != 0;
      ScenarioAgent agent{id, AgentMeta(length, width, static_cast<AgentClass>(cls)), {}, sdc};
      agent.states.reserve(n_steps);
      for (std::uint32_t t = 0; t < n_steps; ++t) {
        AgentState st;
        st.valid = r.get<std::uint8_t>() != 0;
        st.x = r.get<double>();
        st.y = r.get<double>();
        st.h = r.get<double>();
        agent.states.push_back(st);
      }
      s.agents.push_back(std::move(agent));
    }
    try {
      s.validate();
    } catch (const DataError& e) {
      throw DataError("record at byte offset " + std::to_string(record_start) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  if (!r.done()) {
    throw DataError("trailing bytes after last scenario at byte offset " + std::to_string(r.pos()));
  }
  return out;
}

Corpus read_scenarios(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, kBinaryMagic, 4) == 0) {
    return read_scenarios_binary(path);
  }
  return read_scenarios_jsonl(path);
}

void write_scenarios(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.extension() == ".bin" || path.extension() == ".tgsb") {
    write_scenarios_binary(path, corpus);
  } else {
    write_scenarios_jsonl(path, corpus);
  }
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

CorpusSplit split_corpus(const Corpus& corpus, double val_fraction, std::uint64_t seed) {
  CorpusSplit split;
  for (const auto& s : corpus) {
    const std::uint64_t h = mix_seed(seed, fnv1a(s.id));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    (u < val_fraction ? split.val : split.train).push_back(s);
  }
  return split;
}

}  // namespace trajeglish
