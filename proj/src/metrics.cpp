#include "trajeglish/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "trajeglish/error.hpp"

namespace trajeglish {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

StateGrid state_grid(const Scenario& sc) {
  StateGrid g;
  g.reserve(sc.agents.size());
  for (const auto& a : sc.agents) g.push_back(a.states);
  return g;
}

std::vector<AgentMeta> metas_of(const Scenario& sc) {
  std::vector<AgentMeta> m;
  m.reserve(sc.agents.size());
  for (const auto& a : sc.agents) m.push_back(a.meta);
  return m;
}

double ade(std::span<const AgentState> a, std::span<const AgentState> b) {
  if (a.size() != b.size()) throw std::invalid_argument("ade: track lengths differ");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (!a[t].valid || !b[t].valid) continue;
    sum += std::hypot(a[t].x - b[t].x, a[t].y - b[t].y);
    ++n;
  }
  if (n == 0) throw DataError("ade: tracks share no valid timestep");
  return sum / static_cast<double>(n);
}

AdeResult ade(const StateGrid& a, const StateGrid& b) {
  if (a.size() != b.size()) throw std::invalid_argument("ade: agent counts differ");
  AdeResult r;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw std::invalid_argument("ade: track lengths differ");
    double s = 0.0;
    std::size_t k = 0;
    for (std::size_t t = 0; t < a[i].size(); ++t) {
      if (!a[i][t].valid || !b[i][t].valid) continue;
      s += std::hypot(a[i][t].x - b[i][t].x, a[i][t].y - b[i][t].y);
      ++k;
    }
    r.per_agent.push_back(k ? s / static_cast<double>(k) : kNaN);
    sum += s;
    n += k;
  }
  if (n == 0) throw DataError("ade: tracks share no valid timestep");
  r.aggregate = sum / static_cast<double>(n);
  return r;
}

double scenario_distance(const StateGrid& rollout, const StateGrid& log, std::span<const AgentMeta> metas) {
  if (rollout.size() != log.size() || metas.size() != log.size()) {
    throw std::invalid_argument("scenario_distance: agent counts differ");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const std::size_t steps = std::min(rollout[i].size(), log[i].size());
    for (std::size_t t = 0; t < steps; ++t) {
      if (!rollout[i][t].valid || !log[i][t].valid) continue;
      sum += corner_distance(rollout[i][t], log[i][t], metas[i]);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : kNaN;
}

double min_scenario_distance(std::span<const StateGrid> rollouts, const StateGrid& log,
                             std::span<const AgentMeta> metas) {
  if (rollouts.empty()) throw std::invalid_argument("min_scenario_distance: no rollouts");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : rollouts) best = std::min(best, scenario_distance(r, log, metas));
  return best;
}

CollisionCurve collision_rate(const StateGrid& states, std::span<const AgentMeta> metas) {
  if (metas.size() != states.size()) throw std::invalid_argument("collision_rate: metas/states mismatch");
  CollisionCurve c;
  const std::size_t n = states.size();
  std::size_t steps = 0;
  for (const auto& tr : states) steps = std::max(steps, tr.size());
  c.per_step.assign(steps, 0.0);
  c.pair_count.assign(steps, 0);
  for (auto& v : c.class_step) v.assign(steps, kNaN);
  std::vector<char> ever(n, 0), seen(n, 0), hit(n);
  auto valid = [&](std::size_t i, std::size_t t) { return t < states[i].size() && states[i][t].valid; };
  for (std::size_t t = 0; t < steps; ++t) {
    std::fill(hit.begin(), hit.end(), 0);
    std::size_t n_valid = 0;
    std::array<std::size_t, kNumAgentClasses> cls_valid{}, cls_hit{};
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid(i, t)) continue;
      ++n_valid;
      seen[i] = 1;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!valid(j, t)) continue;
        if (boxes_overlap(states[i][t], metas[i], states[j][t], metas[j])) {
          hit[i] = hit[j] = 1;
          c.pair_count[t] += 1;
        }
      }
    }
    std::size_t n_hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid(i, t)) continue;
      const auto k = static_cast<std::size_t>(metas[i].cls());
      cls_valid[k] += 1;
      if (hit[i]) {
        ++n_hit;
        cls_hit[k] += 1;
        ever[i] = 1;
      }
    }
    c.per_step[t] = n_valid ? static_cast<double>(n_hit) / static_cast<double>(n_valid) : 0.0;
    for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
      if (cls_valid[k]) c.class_step[k][t] = static_cast<double>(cls_hit[k]) / static_cast<double>(cls_valid[k]);
    }
  }
  std::size_t agents = 0, colliding = 0;
  std::array<std::size_t, kNumAgentClasses> cls_col{};
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen[i]) continue;
    const auto k = static_cast<std::size_t>(metas[i].cls());
    ++agents;
    c.class_agents[k] += 1;
    if (ever[i]) {
      ++colliding;
      cls_col[k] += 1;
    }
  }
  c.aggregate = agents ? static_cast<double>(colliding) / static_cast<double>(agents) : 0.0;
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    c.class_aggregate[k] = c.class_agents[k] ? static_cast<double>(cls_col[k]) / static_cast<double>(c.class_agents[k]) : kNaN;
  }
  return c;
}

TokenFrequency token_frequency(std::span<const std::vector<int>> tokens, std::span<const AgentClass> classes,
                               std::size_t vocab_size) {
  if (tokens.size() != classes.size()) throw std::invalid_argument("token_frequency: tokens/classes mismatch");
  TokenFrequency f;
  for (auto& h : f.histogram) h.assign(vocab_size, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto k = static_cast<std::size_t>(classes[i]);
    for (int tok : tokens[i]) {
      if (tok < 0) continue;
      if (static_cast<std::size_t>(tok) >= vocab_size) throw std::out_of_range("token_frequency: token id out of range");
      f.histogram[k][static_cast<std::size_t>(tok)] += 1.0;
      f.counts[k] += 1;
    }
  }
  for (std::size_t k = 0; k < kNumAgentClasses; ++k) {
    if (f.counts[k]) {
      for (double& v : f.histogram[k]) v /= static_cast<double>(f.counts[k]);
    }
    f.sorted[k] = f.histogram[k];
    std::sort(f.sorted[k].begin(), f.sorted[k].end(), std::greater<>());
  }
  return f;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

void MetricReport::scalar(const std::string& name, double value, const std::string& unit) {
  scalars_[name] = {value, unit};
}

void MetricReport::curve(const std::string& name, Curve c) {
  if (c.x.size() != c.y.size()) throw std::invalid_argument("MetricReport: curve x/y size mismatch");
  curves_[name] = std::move(c);
}

double MetricReport::get(const std::string& name) const {
  const auto it = scalars_.find(name);
  if (it == scalars_.end()) throw std::out_of_range("MetricReport: no scalar " + name);
  return it->second.first;
}

const MetricReport::Curve& MetricReport::get_curve(const std::string& name) const {
  const auto it = curves_.find(name);
  if (it == curves_.end()) throw std::out_of_range("MetricReport: no curve " + name);
  return it->second;
}

namespace {

// NaN is not representable in JSON; it is written as null.
nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["scalars"] = nlohmann::json::object();
  for (const auto& [name, v] : scalars_) j["scalars"][name] = {{"value", num(v.first)}, {"unit", v.second}};
  j["curves"] = nlohmann::json::object();
  for (const auto& [name, c] : curves_) {
    nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
    for (double x : c.x) xs.push_back(num(x));
    for (double y : c.y) ys.push_back(num(y));
    j["curves"][name] = {{"unit", c.unit}, {"x_label", c.x_label}, {"x", xs}, {"y", ys}};
  }
  return j.dump(1);
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "name,unit,x_label,x,y\n";
  for (const auto& [name, v] : scalars_) out << name << ',' << v.second << ",,," << v.first << '\n';
  for (const auto& [name, c] : curves_) {
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      out << name << ',' << c.unit << ',' << c.x_label << ',' << c.x[i] << ',' << c.y[i] << '\n';
    }
  }
  return out.str();
}

void MetricReport::save(const std::filesystem::path& json_path) const {
  {
    std::ofstream out(json_path);
    if (!out) throw DataError("cannot write " + json_path.string());
    out << to_json() << '\n';
  }
  auto csv = json_path;
  csv.replace_extension(".csv");
  std::ofstream out(csv);
  if (!out) throw DataError("cannot write " + csv.string());
  out << to_csv();
}

}  // namespace trajeglish
