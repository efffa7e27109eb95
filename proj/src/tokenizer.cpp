#include "trajeglish/tokenizer.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "trajeglish/error.hpp"
#include "trajeglish/sampling.hpp"

namespace trajeglish {

using nlohmann::json;

std::string_view to_string(VocabMethod m) {
  switch (m) {
    case VocabMethod::kKDisks: return "kdisks";
    case VocabMethod::kKMeans: return "kmeans";
    case VocabMethod::kGridXYH: return "grid_xyh";
    case VocabMethod::kGridXY: return "grid_xy";
  }
  return "kdisks";
}

VocabMethod vocab_method_from_string(std::string_view s) {
  if (s == "kdisks") return VocabMethod::kKDisks;
  if (s == "kmeans") return VocabMethod::kKMeans;
  if (s == "grid_xyh") return VocabMethod::kGridXYH;
  if (s == "grid_xy") return VocabMethod::kGridXY;
  throw ConfigError("unknown vocabulary method '" + std::string(s) + "'");
}

TemplateSet::TemplateSet(std::vector<Template> templates, VocabMethod method, double epsilon,
                         std::uint64_t seed, FitStats stats)
    : templates_(std::move(templates)), method_(method), epsilon_(epsilon), seed_(seed), stats_(stats) {
  if (templates_.empty()) throw std::invalid_argument("TemplateSet: vocabulary must be non-empty");
  cos_.reserve(templates_.size());
  sin_.reserve(templates_.size());
  for (auto& t : templates_) {
    t.dh = wrap_angle(t.dh);
    cos_.push_back(std::cos(t.dh));
    sin_.push_back(std::sin(t.dh));
  }
}

void TemplateSet::distances(const AgentState& local, double length, double width,
                            std::span<double> out) const {
  const double c = std::cos(local.h), s = std::sin(local.h);
  const double hl = 0.5 * length, hw = 0.5 * width;
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    out[i] = corner_distance_raw(templates_[i].dx - local.x, templates_[i].dy - local.y, cos_[i],
                                 sin_[i], c, s, hl, hw);
  }
}

std::size_t TemplateSet::nearest(const AgentState& local, double length, double width) const {
  const double c = std::cos(local.h), s = std::sin(local.h);
  const double hl = 0.5 * length, hw = 0.5 * width;
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    const double d = corner_distance_raw(templates_[i].dx - local.x, templates_[i].dy - local.y,
                                         cos_[i], sin_[i], c, s, hl, hw);
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::string TemplateSet::to_json() const {
  json j;
  j["format"] = "trajeglish.template_set";
  j["version"] = 1;
  j["method"] = to_string(method_);
  j["epsilon"] = epsilon_;
  j["seed"] = seed_;
  json arr = json::array();
  for (const auto& t : templates_) arr.push_back({t.dx, t.dy, t.dh});
  j["templates"] = std::move(arr);
  json stats;
  stats["expected_error"] = stats_.expected_error;
  stats["restarts"] = stats_.restarts;
  stats["chosen_restart"] = stats_.chosen_restart;
  json per_class = json::object();
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    per_class[std::string(to_string(static_cast<AgentClass>(c)))] = {
        {"error", stats_.class_error[c]}, {"count", stats_.class_count[c]}};
  }
  stats["per_class"] = std::move(per_class);
  j["fit_stats"] = std::move(stats);
  return j.dump(1);
}

TemplateSet TemplateSet::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("template set parse error: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "trajeglish.template_set") {
      throw DataError("not a template set document");
    }
    if (j.at("version").get<int>() != 1) throw DataError("unsupported template set version");
    std::vector<Template> templates;
    for (const auto& t : j.at("templates")) {
      templates.push_back({t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()});
    }
    FitStats stats;
    if (j.contains("fit_stats")) {
      const auto& fs = j["fit_stats"];
      stats.expected_error = fs.value("expected_error", 0.0);
      stats.restarts = fs.value("restarts", std::size_t{1});
      stats.chosen_restart = fs.value("chosen_restart", std::size_t{0});
      if (fs.contains("per_class")) {
        for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
          const std::string key(to_string(static_cast<AgentClass>(c)));
          if (fs["per_class"].contains(key)) {
            stats.class_error[c] = fs["per_class"][key].value("error", 0.0);
            stats.class_count[c] = fs["per_class"][key].value("count", std::size_t{0});
          }
        }
      }
    }
    return TemplateSet(std::move(templates),
                       vocab_method_from_string(j.at("method").get<std::string>()),
                       j.at("epsilon").get<double>(), j.at("seed").get<std::uint64_t>(), stats);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed template set: ") + e.what());
  }
}

void TemplateSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json() << '\n';
}

TemplateSet TemplateSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open template set " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

int tokenize_step(const AgentState& s0, const AgentState& s, const AgentMeta& m,
                  const TemplateSet& ts) {
  if (!s0.valid || !s.valid) throw std::invalid_argument("tokenize_step: invalid state");
  return static_cast<int>(ts.nearest(to_local(s0, s), m.length(), m.width()));
}

AgentState render(const AgentState& s0, int token, const TemplateSet& ts) {
  if (token < 0 || static_cast<std::size_t>(token) >= ts.size()) {
    throw std::out_of_range("render: token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(ts.size()));
  }
  return to_global(s0, ts[static_cast<std::size_t>(token)].as_state());
}

std::vector<double> noisy_token_distribution(const AgentState& s0, const AgentState& s,
                                             const AgentMeta& m, const TemplateSet& ts,
                                             double sigma, double p_top) {
  if (sigma < 0.0) throw std::invalid_argument("tokenize_noisy: sigma must be >= 0");
  if (!(p_top > 0.0) || p_top > 1.0) throw std::invalid_argument("tokenize_noisy: p_top must be in (0, 1]");
  std::vector<double> probs(ts.size(), 0.0);
  if (sigma == 0.0) {
    probs[static_cast<std::size_t>(tokenize_step(s0, s, m, ts))] = 1.0;
    return probs;
  }
  std::vector<double> d(ts.size());
  ts.distances(to_local(s0, s), m.length(), m.width(), d);
  for (double& v : d) v = -v;
  return nucleus(softmax(d, sigma), p_top);
}

int tokenize_noisy(const AgentState& s0, const AgentState& s, const AgentMeta& m,
                   const TemplateSet& ts, double sigma, double p_top, Rng& rng) {
  const auto probs = noisy_token_distribution(s0, s, m, ts, sigma, p_top);
  return static_cast<int>(rng.categorical(probs));
}

TokenizedTrajectory tokenize_trajectory(std::span<const AgentState> states, const AgentMeta& m,
                                        const TemplateSet& ts) {
  TokenizedTrajectory out;
  const std::size_t n = states.size();
  out.token_ids.assign(n, kInvalidToken);
  out.snapped_states.assign(n, AgentState::invalid());
  out.error_per_step.assign(n, std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return out;
  for (std::size_t k = 0; k < n; ++k) {
    if (!states[k].valid) continue;
    if (k == 0 || !out.snapped_states[k - 1].valid) {
      // Anchor (start of track or first valid state after a gap).
      out.snapped_states[k] = states[k];
      out.error_per_step[k] = 0.0;
      continue;
    }
    const AgentState& base = out.snapped_states[k - 1];
    const int tok = static_cast<int>(ts.nearest(to_local(base, states[k]), m.length(), m.width()));
    out.token_ids[k] = tok;
    out.snapped_states[k] = render(base, tok, ts);
    out.error_per_step[k] = corner_distance(states[k], out.snapped_states[k], m);
  }
  return out;
}

std::vector<int> noisy_chain_tokens(const TokenizedTrajectory& chain,
                                    std::span<const AgentState> states, const AgentMeta& m,
                                    const TemplateSet& ts, double sigma, double p_top, Rng& rng) {
  std::vector<int> out(chain.token_ids.size(), kInvalidToken);
  for (std::size_t k = 1; k < out.size(); ++k) {
    if (chain.token_ids[k] == kInvalidToken) continue;
    out[k] = tokenize_noisy(chain.snapped_states[k - 1], states[k], m, ts, sigma, p_top, rng);
  }
  return out;
}

std::vector<AgentState> rerender(const TokenizedTrajectory& chain, const TemplateSet& ts) {
  std::vector<AgentState> out(chain.snapped_states.size(), AgentState::invalid());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (chain.token_ids[k] != kInvalidToken) {
      out[k] = render(out[k - 1], chain.token_ids[k], ts);
    } else {
      out[k] = chain.snapped_states[k];
    }
  }
  return out;
}

}  // namespace trajeglish
