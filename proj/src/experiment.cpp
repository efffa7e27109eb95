#include "trajeglish/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "trajeglish/census.hpp"
#include "trajeglish/checkpoint.hpp"
#include "trajeglish/discretization.hpp"
#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"

namespace trajeglish {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Visits every key of an object; `f` returns false for unknown keys.
template <typename F>
void read_keys(const json& j, const std::string& where, F&& f) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    try {
      known = f(k, v);
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + where + "." + k + "': " + e.what());
    }
    if (!known) throw ConfigError("unknown config key '" + where + "." + k + "'");
  }
}

template <typename T>
T as(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

void echo_config(const ExperimentConfig& cfg, const std::string& stage) {
  write_text(RunLayout{cfg.run_dir}.config_echo(stage), cfg.to_json().dump(2) + "\n");
}

std::size_t resolved_workers(const ExperimentConfig& cfg) {
  return cfg.workers > 0 ? cfg.workers : default_workers();
}

std::string cls_name(std::size_t c) { return std::string(to_string(static_cast<AgentClass>(c))); }

Corpus read_split(const RunLayout& run, const std::string& split) {
  const auto path = split == "train" ? run.train_corpus() : run.val_corpus();
  require_artifact(path, "generate");
  return read_scenarios(path);
}

TemplateSet read_templates(const RunLayout& run) {
  require_artifact(run.templates(), "fit-vocab");
  return TemplateSet::load(run.templates());
}

Model read_model(const RunLayout& run, const std::string& name, const TemplateSet& ts) {
  require_artifact(run.checkpoint(name), "train");
  Checkpoint ck = load_checkpoint(run.checkpoint(name));
  if (static_cast<std::size_t>(ck.model.config().vocab_size) != ts.size()) {
    throw DataError("checkpoint " + run.checkpoint(name).string() + " has vocabulary size " +
                    std::to_string(ck.model.config().vocab_size) + " but the template set has " +
                    std::to_string(ts.size()) + "; rerun `trajeglish train`");
  }
  return std::move(ck.model);
}

json census_json(const TokenCensus& c) {
  return {{"scenarios", c.scenarios},         {"agents", c.agents},
          {"moving_agents", c.moving_agents}, {"total_tokens", c.total_tokens},
          {"moving_tokens", c.moving_tokens}, {"scene_seconds", c.scene_seconds},
          {"tokens_per_hour", c.tokens_per_hour}};
}

}  // namespace

nlohmann::json synth_config_to_json(const SynthConfig& c) {
  return {{"n_scenarios", c.n_scenarios},
          {"agents_per_scene", c.agents_per_scene},
          {"horizon", c.horizon},
          {"mix",
           {{"lane_follow", c.mix.lane_follow},
            {"turn", c.mix.turn},
            {"stop_and_go", c.mix.stop_and_go},
            {"pedestrian_cluster", c.mix.pedestrian_cluster},
            {"paired_lane_change", c.mix.paired_lane_change},
            {"idle", c.mix.idle}}},
          {"noise",
           {{"speed", c.noise.speed},
            {"lateral", c.noise.lateral},
            {"heading", c.noise.heading},
            {"pedestrian_heading", c.noise.pedestrian_heading},
            {"position", c.noise.position}}},
          {"missing_rate", c.missing_rate},
          {"tick", c.tick},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  read_keys(j, "data.synth", [&](const std::string& k, const json& v) {
    if (k == "n_scenarios") c.n_scenarios = v.get<std::size_t>();
    else if (k == "agents_per_scene") c.agents_per_scene = v.get<std::size_t>();
    else if (k == "horizon") c.horizon = v.get<std::size_t>();
    else if (k == "missing_rate") c.missing_rate = v.get<double>();
    else if (k == "tick") c.tick = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "mix") {
      read_keys(v, "data.synth.mix", [&](const std::string& mk, const json& mv) {
        double* slot = mk == "lane_follow"          ? &c.mix.lane_follow
                       : mk == "turn"               ? &c.mix.turn
                       : mk == "stop_and_go"        ? &c.mix.stop_and_go
                       : mk == "pedestrian_cluster" ? &c.mix.pedestrian_cluster
                       : mk == "paired_lane_change" ? &c.mix.paired_lane_change
                       : mk == "idle"               ? &c.mix.idle
                                                    : nullptr;
        if (!slot) return false;
        *slot = mv.get<double>();
        return true;
      });
    } else if (k == "noise") {
      read_keys(v, "data.synth.noise", [&](const std::string& nk, const json& nv) {
        double* slot = nk == "speed"                ? &c.noise.speed
                       : nk == "lateral"            ? &c.noise.lateral
                       : nk == "heading"            ? &c.noise.heading
                       : nk == "pedestrian_heading" ? &c.noise.pedestrian_heading
                       : nk == "position"           ? &c.noise.position
                                                    : nullptr;
        if (!slot) return false;
        *slot = nv.get<double>();
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  if (c.n_scenarios == 0 || c.agents_per_scene == 0 || c.horizon == 0) {
    throw ConfigError("data.synth: n_scenarios, agents_per_scene and horizon must be positive");
  }
  if (!(c.tick > 0.0)) throw ConfigError("data.synth.tick must be positive");
  if (c.missing_rate < 0.0 || c.missing_rate > 1.0) throw ConfigError("data.synth.missing_rate must be in [0, 1]");
  return c;
}

std::string ExperimentConfig::model_name() const {
  if (!name.empty()) return name;
  std::string n(to_string(model.regime));
  if (train.examples.noisy.enabled) n += "_noisy";
  return n;
}

nlohmann::json ExperimentConfig::to_json() const {
  json j;
  j["run_dir"] = run_dir.string();
  j["name"] = model_name();
  j["workers"] = workers;
  j["data"] = {{"synth", synth_config_to_json(data.synth)},
               {"corpus", data.corpus},
               {"val_fraction", data.val_fraction},
               {"split_seed", data.split_seed}};
  j["vocab"] = {{"method", to_string(vocab.method)}, {"size", vocab.size},         {"epsilon", vocab.epsilon},
                {"seed", vocab.seed},                {"restarts", vocab.restarts}, {"compare", vocab.compare}};
  j["model"] = model.to_json();
  j["train"] = train.to_json();
  json r = rollout.config.to_json();
  j["rollout"] = {{"config", r},
                  {"t0", rollout.t0},
                  {"max_scenarios", rollout.max_scenarios},
                  {"control", to_string(rollout.control)},
                  {"sdc_replay", rollout.sdc_replay}};
  j["eval"] = {{"n_steps", eval.n_steps},
               {"contexts", eval.contexts},
               {"max_examples", eval.max_examples},
               {"nll", eval.nll},
               {"rollouts", eval.rollouts}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  read_keys(j, "config", [&](const std::string& k, const json& v) {
    if (k == "run_dir") c.run_dir = v.get<std::string>();
    else if (k == "name") c.name = v.get<std::string>();
    else if (k == "workers") c.workers = v.get<std::size_t>();
    else if (k == "data") {
      read_keys(v, "data", [&](const std::string& dk, const json& dv) {
        if (dk == "synth") c.data.synth = synth_config_from_json(dv);
        else if (dk == "corpus") c.data.corpus = dv.get<std::string>();
        else if (dk == "val_fraction") c.data.val_fraction = dv.get<double>();
        else if (dk == "split_seed") c.data.split_seed = dv.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (k == "vocab") {
      read_keys(v, "vocab", [&](const std::string& vk, const json& vv) {
        if (vk == "method") c.vocab.method = vocab_method_from_string(vv.get<std::string>());
        else if (vk == "size") c.vocab.size = vv.get<std::size_t>();
        else if (vk == "epsilon") c.vocab.epsilon = vv.get<double>();
        else if (vk == "seed") c.vocab.seed = vv.get<std::uint64_t>();
        else if (vk == "restarts") c.vocab.restarts = vv.get<std::size_t>();
        else if (vk == "compare") c.vocab.compare = vv.get<bool>();
        else return false;
        return true;
      });
    } else if (k == "model") {
      c.model = ModelConfig::from_json(v);
    } else if (k == "train") {
      c.train = TrainConfig::from_json(v);
    } else if (k == "rollout") {
      read_keys(v, "rollout", [&](const std::string& rk, const json& rv) {
        if (rk == "config") c.rollout.config = RolloutConfig::from_json(rv);
        else if (rk == "t0") c.rollout.t0 = rv.get<std::size_t>();
        else if (rk == "max_scenarios") c.rollout.max_scenarios = rv.get<std::size_t>();
        else if (rk == "control") {
          c.rollout.control = controller_from_string(rv.get<std::string>());
          if (c.rollout.control == Controller::kExternal) {
            throw ConfigError("rollout.control must be 'model' or 'replay'");
          }
        } else if (rk == "sdc_replay") c.rollout.sdc_replay = rv.get<bool>();
        else return false;
        return true;
      });
    } else if (k == "eval") {
      read_keys(v, "eval", [&](const std::string& ek, const json& ev) {
        if (ek == "n_steps") c.eval.n_steps = ev.get<int>();
        else if (ek == "contexts") c.eval.contexts = ev.get<std::vector<int>>();
        else if (ek == "max_examples") c.eval.max_examples = ev.get<std::size_t>();
        else if (ek == "nll") c.eval.nll = ev.get<bool>();
        else if (ek == "rollouts") c.eval.rollouts = ev.get<bool>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  if (c.run_dir.empty()) throw ConfigError("run_dir must not be empty");
  if (c.data.val_fraction <= 0.0 || c.data.val_fraction >= 1.0) {
    throw ConfigError("data.val_fraction must be in (0, 1)");
  }
  if (c.vocab.size == 0) throw ConfigError("vocab.size must be positive");
  if (c.vocab.method == VocabMethod::kKDisks && !(c.vocab.epsilon > 0.0)) {
    throw ConfigError("vocab.epsilon must be positive for kdisks");
  }
  if (c.vocab.restarts == 0) throw ConfigError("vocab.restarts must be positive");
  if (c.eval.n_steps < 0 || c.eval.n_steps > c.model.max_timesteps) {
    throw ConfigError("eval.n_steps must be in [0, model.max_timesteps]");
  }
  c.train.validate();
  c.rollout.config.validate();
  return c;
}

nlohmann::json load_config_document(const std::filesystem::path& path) {
  json doc;
  fs::path current = path;
  std::vector<json> layers;
  for (int depth = 0;; ++depth) {
    if (depth > 8) throw ConfigError("config 'base' chain is too deep at " + current.string());
    std::ifstream in(current);
    if (!in) throw ConfigError("cannot read config file " + current.string());
    json layer;
    try {
      layer = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config parse error in " + current.string() + ": " + e.what());
    }
    if (!layer.is_object()) throw ConfigError("config " + current.string() + " must be a JSON object");
    const bool has_base = layer.contains("base");
    fs::path base;
    if (has_base) {
      base = current.parent_path() / as<std::string>(layer["base"], "base");
      layer.erase("base");
    }
    layers.push_back(std::move(layer));
    if (!has_base) break;
    current = base;
  }
  doc = json::object();
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) doc.merge_patch(*it);
  return doc;
}

void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed override key '" + dotted_key + "'");
    if (!node->is_object() && !node->is_null()) throw ConfigError("override '" + dotted_key + "' descends into a non-object");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json parsed = json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? json(value) : std::move(parsed);
}

void require_artifact(const std::filesystem::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw DataError("missing " + path.string() + "; run `trajeglish " + producer + "` first");
  }
}

TemplateSet fit_vocabulary(const VocabSection& v, std::span<const Transition> transitions, std::size_t workers) {
  Rng rng(v.seed);
  switch (v.method) {
    case VocabMethod::kKDisks: {
      KDisksOptions o;
      o.restarts = v.restarts;
      o.workers = workers;
      return fit_kdisks(transitions, v.size, v.epsilon, rng, o);
    }
    case VocabMethod::kKMeans: {
      KMeansOptions o;
      o.workers = workers;
      return fit_kmeans(transitions, v.size, v.restarts, rng, o);
    }
    case VocabMethod::kGridXYH: {
      const auto n = grid_xyh_counts(v.size);
      return fit_grid_xyh(n[0], n[1], n[2]);
    }
    case VocabMethod::kGridXY: {
      const std::size_t n = grid_xy_count(v.size);
      return fit_grid_xy(n, n, transitions);
    }
  }
  throw ConfigError("unknown vocabulary method");
}

std::string fit_comparison_csv(const VocabSection& v, std::span<const Transition> fit_on, const Corpus& held_out,
                               std::size_t workers) {
  const auto held_out_transitions = extract_transitions(held_out);
  std::ostringstream out;
  out.precision(10);
  out << "method,vocab_size,one_step_error_cm,chain_error_cm";
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) out << ',' << cls_name(c) << "_chain_error_cm";
  out << '\n';
  std::vector<VocabMethod> methods{v.method};
  if (v.compare) {
    for (auto m : {VocabMethod::kKDisks, VocabMethod::kKMeans, VocabMethod::kGridXYH, VocabMethod::kGridXY}) {
      if (m != v.method) methods.push_back(m);
    }
  }
  for (VocabMethod m : methods) {
    VocabSection vm = v;
    vm.method = m;
    const TemplateSet ts = fit_vocabulary(vm, fit_on, workers);
    const FitStats s = evaluate_one_step(ts, held_out_transitions);
    const DiscretizationReport rep = discretization_report(held_out, ts, workers);
    out << to_string(m) << ',' << ts.size() << ',' << 100.0 * s.expected_error << ',' << 100.0 * rep.mean_error;
    for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
      out << ',';
      if (s.class_count[c] > 0) out << 100.0 * rep.class_mean_error[c];
    }
    out << '\n';
  }
  return out.str();
}

void check_vocab_classes(const TemplateSet& ts, const Corpus& corpus) {
  const auto& counts = ts.fit_stats().class_count;
  if (std::all_of(counts.begin(), counts.end(), [](std::size_t n) { return n == 0; })) return;
  for (const auto& sc : corpus) {
    for (const auto& a : sc.agents) {
      const auto c = static_cast<std::size_t>(a.meta.cls());
      if (counts[c] == 0) {
        throw DataError("scenario " + sc.id + " has " + cls_name(c) +
                        " agents but the vocabulary was fit without any; refit with `trajeglish fit-vocab`");
      }
    }
  }
}

std::vector<RolloutRecord> read_rollouts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read rollouts " + path.string());
  std::vector<RolloutRecord> out;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      RolloutRecord r;
      r.scenario = j.at("scenario").get<std::string>();
      r.index = seen[r.scenario]++;
      r.t0 = j.at("t0").get<std::size_t>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.agent_ids = j.at("agents").get<std::vector<std::int64_t>>();
      const std::size_t n = r.agent_ids.size();
      const auto& tok = j.at("tokens");
      const auto& st = j.at("states");
      const auto& lp = j.at("log_probs");
      if (tok.size() != n || st.size() != n || lp.size() != n) throw DataError("row count mismatch");
      const int horizon = n > 0 ? static_cast<int>(tok.at(0).size()) : 0;
      r.tokens = TokenGrid(static_cast<int>(n), horizon);
      r.states.resize(n);
      r.log_probs.resize(n);
      for (std::size_t a = 0; a < n; ++a) {
        if (static_cast<int>(tok[a].size()) != horizon) throw DataError("ragged token rows");
        for (int t = 0; t < horizon; ++t) r.tokens.at(static_cast<int>(a), t) = tok[a][t].get<int>();
        for (const auto& s : st[a]) {
          r.states[a].push_back(s.is_null() ? AgentState::invalid()
                                            : AgentState{s.at(0).get<double>(), s.at(1).get<double>(),
                                                         s.at(2).get<double>(), true});
        }
        for (const auto& v : lp[a]) {
          r.log_probs[a].push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
        }
      }
      r.total_log_prob = j.at("total_log_prob").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

MetricReport rollout_metrics(const std::vector<RolloutRecord>& records, const Corpus& scenarios) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t s = 0; s < scenarios.size(); ++s) by_id[scenarios[s].id] = s;

  std::size_t n_seeds = 0, horizon = 0;
  for (const auto& r : records) {
    n_seeds = std::max(n_seeds, r.index + 1);
    if (!r.states.empty()) horizon = std::max(horizon, r.states.front().size());
  }
  std::vector<double> seed_sum(n_seeds, 0.0), seed_n(n_seeds, 0.0);
  std::vector<double> step_sum(horizon, 0.0), step_n(horizon, 0.0);
  std::vector<double> log_step_sum(horizon, 0.0), log_step_n(horizon, 0.0);
  std::array<double, kNumAgentClasses> cls_sum{}, cls_n{};
  double coll_sum = 0.0, log_sum = 0.0, log_n = 0.0, dist_sum = 0.0, dist_n = 0.0, lp_sum = 0.0;
  std::map<std::string, double> min_dist;

  for (const auto& r : records) {
    const auto it = by_id.find(r.scenario);
    if (it == by_id.end()) throw DataError("rollout refers to unknown scenario " + r.scenario);
    const Scenario& sc = scenarios[it->second];
    std::unordered_map<std::int64_t, std::size_t> agent_index;
    for (std::size_t a = 0; a < sc.agents.size(); ++a) agent_index[sc.agents[a].id] = a;
    std::vector<AgentMeta> metas;
    StateGrid log(r.agent_ids.size());
    for (std::size_t a = 0; a < r.agent_ids.size(); ++a) {
      const auto ai = agent_index.find(r.agent_ids[a]);
      if (ai == agent_index.end()) throw DataError("rollout refers to unknown agent in " + r.scenario);
      const auto& track = sc.agents[ai->second];
      metas.push_back(track.meta);
      for (std::size_t k = 0; k < r.states[a].size(); ++k) {
        const std::size_t t = r.t0 + k;
        log[a].push_back(t < track.states.size() ? track.states[t] : AgentState::invalid());
      }
    }
    const CollisionCurve cc = collision_rate(r.states, metas);
    coll_sum += cc.aggregate;
    seed_sum[r.index] += cc.aggregate;
    seed_n[r.index] += 1.0;
    for (std::size_t k = 0; k < cc.per_step.size(); ++k) {
      if (std::isfinite(cc.per_step[k])) {
        step_sum[k] += cc.per_step[k];
        step_n[k] += 1.0;
      }
    }
    for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
      if (cc.class_agents[c] > 0) {
        cls_sum[c] += cc.class_aggregate[c];
        cls_n[c] += 1.0;
      }
    }
    if (r.index == 0) {
      const CollisionCurve lc = collision_rate(log, metas);
      log_sum += lc.aggregate;
      log_n += 1.0;
      for (std::size_t k = 0; k < lc.per_step.size(); ++k) {
        if (std::isfinite(lc.per_step[k])) {
          log_step_sum[k] += lc.per_step[k];
          log_step_n[k] += 1.0;
        }
      }
    }
    const double d = scenario_distance(r.states, log, metas);
    if (std::isfinite(d)) {
      dist_sum += d;
      dist_n += 1.0;
      auto [m, inserted] = min_dist.emplace(r.scenario, d);
      if (!inserted) m->second = std::min(m->second, d);
    }
    lp_sum += r.total_log_prob;
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto ratio = [&](double a, double b) { return b > 0.0 ? a / b : nan; };
  MetricReport rep;
  const double n = static_cast<double>(records.size());
  rep.scalar("rollouts", n, "count");
  rep.scalar("collision_rate", ratio(coll_sum, n), "probability");
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    rep.scalar("collision_rate_" + cls_name(c), ratio(cls_sum[c], cls_n[c]), "probability");
  }
  rep.scalar("log_collision_rate", ratio(log_sum, log_n), "probability");
  rep.scalar("mean_scenario_distance", ratio(dist_sum, dist_n), "m");
  double md = 0.0;
  for (const auto& [id, v] : min_dist) md += v;
  rep.scalar("min_scenario_distance", ratio(md, static_cast<double>(min_dist.size())), "m");
  rep.scalar("mean_total_log_prob", ratio(lp_sum, n), "nats");

  MetricReport::Curve by_seed{"probability", "rollout index", {}, {}};
  for (std::size_t r = 0; r < n_seeds; ++r) {
    by_seed.x.push_back(static_cast<double>(r));
    by_seed.y.push_back(ratio(seed_sum[r], seed_n[r]));
  }
  rep.curve("collision_by_seed", std::move(by_seed));
  double tick = scenarios.empty() ? kDefaultTick : scenarios.front().tick;
  MetricReport::Curve per_step{"probability", "seconds", {}, {}}, log_step{"probability", "seconds", {}, {}};
  for (std::size_t k = 0; k < horizon; ++k) {
    per_step.x.push_back(static_cast<double>(k) * tick);
    per_step.y.push_back(ratio(step_sum[k], step_n[k]));
    log_step.x.push_back(static_cast<double>(k) * tick);
    log_step.y.push_back(ratio(log_step_sum[k], log_step_n[k]));
  }
  rep.curve("collision_per_step", std::move(per_step));
  rep.curve("log_collision_per_step", std::move(log_step));
  return rep;
}

void cmd_generate(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  Corpus corpus;
  if (!cfg.data.corpus.empty()) {
    if (!fs::exists(cfg.data.corpus)) throw DataError("corpus file not found: " + cfg.data.corpus);
    corpus = read_scenarios(cfg.data.corpus);
  } else {
    SynthConfig sc = cfg.data.synth;
    sc.workers = resolved_workers(cfg);
    corpus = generate_synthetic(sc);
  }
  for (const auto& s : corpus) s.validate();
  const CorpusSplit split = split_corpus(corpus, cfg.data.val_fraction, cfg.data.split_seed);
  if (split.train.empty() || split.val.empty()) throw DataError("train/val split left one side empty");
  fs::create_directories(run.train_corpus().parent_path());
  write_scenarios_jsonl(run.train_corpus(), split.train);
  write_scenarios_jsonl(run.val_corpus(), split.val);
  const json census = {{"train", census_json(token_census(split.train))},
                       {"val", census_json(token_census(split.val))},
                       {"all", census_json(token_census(corpus))}};
  write_text(run.census(), census.dump(1) + "\n");
  echo_config(cfg, "generate");
  std::cout << "generate: " << split.train.size() << " train / " << split.val.size() << " val scenarios -> "
            << run.train_corpus().parent_path().string() << "\n";
}

void cmd_fit_vocab(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const std::size_t workers = resolved_workers(cfg);
  const Corpus train = read_split(run, "train");
  const Corpus val = read_split(run, "val");
  const auto fit_on = extract_transitions(train);
  if (fit_on.empty()) throw DataError("training corpus has no transitions");
  TemplateSet ts = fit_vocabulary(cfg.vocab, fit_on, workers);
  // Per-class statistics over every fitting transition; tokenize uses them to detect class mismatches.
  FitStats stats = ts.fit_stats();
  const FitStats full = evaluate_one_step(ts, fit_on);
  stats.expected_error = full.expected_error;
  stats.class_error = full.class_error;
  stats.class_count = full.class_count;
  ts.set_fit_stats(stats);
  fs::create_directories(run.templates().parent_path());
  ts.save(run.templates());
  write_text(run.fit_report(), fit_comparison_csv(cfg.vocab, fit_on, val, workers));
  echo_config(cfg, "fit-vocab");
  std::cout << "fit-vocab: " << to_string(ts.method()) << " |V|=" << ts.size()
            << " expected error " << 100.0 * stats.expected_error << " cm -> " << run.templates().string() << "\n";
}

void cmd_tokenize(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const std::size_t workers = resolved_workers(cfg);
  const TemplateSet ts = read_templates(run);
  Corpus all;
  std::array<TokenFrequency, 2> freq;
  const std::array<std::string, 2> splits{"train", "val"};
  for (std::size_t si = 0; si < splits.size(); ++si) {
    const Corpus corpus = read_split(run, splits[si]);
    check_vocab_classes(ts, corpus);
    std::vector<std::vector<TokenizedTrajectory>> chains(corpus.size());
    parallel_for(corpus.size(), workers, [&](std::size_t s) { chains[s] = tokenize_scenario(corpus[s], ts); });
    std::ostringstream lines;
    std::vector<std::vector<int>> ids;
    std::vector<AgentClass> classes;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
      json agents = json::array(), tokens = json::array();
      for (std::size_t a = 0; a < corpus[s].agents.size(); ++a) {
        agents.push_back(corpus[s].agents[a].id);
        tokens.push_back(chains[s][a].token_ids);
        ids.push_back(chains[s][a].token_ids);
        classes.push_back(corpus[s].agents[a].meta.cls());
      }
      lines << json{{"scenario", corpus[s].id}, {"agents", agents}, {"tokens", tokens}}.dump() << '\n';
    }
    write_text(run.token_grids(splits[si]), lines.str());
    freq[si] = token_frequency(ids, classes, ts.size());
    all.insert(all.end(), corpus.begin(), corpus.end());
  }
  const DiscretizationReport rep = discretization_report(all, ts, workers);
  const double tick = all.empty() ? kDefaultTick : all.front().tick;
  rep.to_report(tick).save(run.discretization());

  MetricReport fr;
  for (std::size_t c = 0; c < kNumAgentClasses; ++c) {
    const std::string cls = cls_name(c);
    fr.scalar("tokens_train_" + cls, static_cast<double>(freq[0].counts[c]), "count");
    fr.scalar("tokens_val_" + cls, static_cast<double>(freq[1].counts[c]), "count");
    if (freq[0].counts[c] > 0 && freq[1].counts[c] > 0) {
      fr.scalar("tv_train_val_" + cls, total_variation(freq[0].histogram[c], freq[1].histogram[c]), "probability");
    }
    MetricReport::Curve sorted{"probability", "rank", {}, freq[0].sorted[c]};
    for (std::size_t k = 0; k < sorted.y.size(); ++k) sorted.x.push_back(static_cast<double>(k));
    fr.curve("frequency_sorted_" + cls, std::move(sorted));
  }
  fr.save(run.token_frequency());
  echo_config(cfg, "tokenize");
  std::cout << "tokenize: mean error " << 100.0 * rep.mean_error << " cm, max collision gap "
            << rep.max_collision_gap << " -> " << run.discretization().parent_path().string() << "\n";
}

void cmd_train(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const std::string name = cfg.model_name();
  const TemplateSet ts = read_templates(run);
  Corpus corpus = read_split(run, "train");
  check_vocab_classes(ts, corpus);
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(ts.size());
  mc.validate();
  TrainConfig tc = cfg.train;
  tc.workers = resolved_workers(cfg);
  const TokenizedCorpus data(std::move(corpus), ts, tc.workers);
  Model model(mc, tc.seed);
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  const TrainResult res = train(model, data, tc, [&](const TrainLogEntry& e) {
    if (e.step % every == 0 || e.step + 1 == tc.steps) {
      std::cout << "train[" << name << "] step " << e.step + 1 << "/" << tc.steps << " loss " << e.loss << "\n"
                << std::flush;
    }
  });
  fs::create_directories(run.checkpoint(name).parent_path());
  fs::remove(run.train_log(name));
  write_train_log(run.train_log(name), res.log);
  const json meta = {{"name", name},
                     {"steps", tc.steps},
                     {"tokens_seen", res.tokens_seen},
                     {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss},
                     {"train", tc.to_json()}};
  save_checkpoint(run.checkpoint(name), model, meta);
  echo_config(cfg, "train-" + name);
  std::cout << "train: " << name << " -> " << run.checkpoint(name).string() << "\n";
}

void cmd_rollout(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const std::string name = cfg.model_name();
  const TemplateSet ts = read_templates(run);
  const Model model = read_model(run, name, ts);
  const Corpus val = read_split(run, "val");
  const std::size_t n = cfg.rollout.max_scenarios > 0 ? std::min(cfg.rollout.max_scenarios, val.size()) : val.size();
  RolloutConfig rc = cfg.rollout.config;
  rc.workers = resolved_workers(cfg);
  const auto path = run.rollouts(name);
  fs::create_directories(path.parent_path());
  fs::remove(path);
  std::size_t written = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const Scenario& sc = val[s];
    if (cfg.rollout.t0 >= sc.num_steps()) {
      throw ConfigError("rollout.t0 = " + std::to_string(cfg.rollout.t0) + " is beyond scenario " + sc.id);
    }
    ControlAssignment control = ControlAssignment::all(sc.num_agents(), cfg.rollout.control);
    if (cfg.rollout.sdc_replay) control.controllers[sc.sdc_index()] = Controller::kReplay;
    RolloutConfig per = rc;
    per.seed = mix_seed(rc.seed, s);
    const auto rs = rollout(model, ts, sc, cfg.rollout.t0, control, per);
    write_rollouts_jsonl(path, sc, rs, per);
    written += rs.size();
  }
  echo_config(cfg, "rollout-" + name);
  std::cout << "rollout: " << written << " rollouts of " << n << " scenarios -> " << path.string() << "\n";
}

void cmd_eval(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const std::string name = cfg.model_name();
  const std::size_t workers = resolved_workers(cfg);
  const TemplateSet ts = read_templates(run);
  Corpus val = read_split(run, "val");
  MetricReport report;
  if (cfg.eval.rollouts) {
    require_artifact(run.rollouts(name), "rollout");
    report = rollout_metrics(read_rollouts_jsonl(run.rollouts(name)), val);
  }
  if (cfg.eval.nll) {
    const Model model = read_model(run, name, ts);
    const TokenizedCorpus data(std::move(val), ts, workers);
    NllSweepOptions o;
    o.n_steps = cfg.eval.n_steps;
    o.contexts = cfg.eval.contexts;
    o.max_examples = cfg.eval.max_examples;
    o.workers = workers;
    const MetricReport nll = nll_sweeps(model, data, o);
    for (const auto& [k, v] : nll.scalars()) report.scalar(k, v.first, v.second);
    for (const auto& [k, c] : nll.curves()) report.curve(k, c);
  }
  fs::create_directories(run.metrics(name).parent_path());
  report.save(run.metrics(name));
  echo_config(cfg, "eval-" + name);
  std::cout << "eval: " << name;
  for (const char* key : {"nll", "collision_rate", "min_scenario_distance"}) {
    if (report.scalars().count(key)) std::cout << " " << key << "=" << report.get(key);
  }
  std::cout << " -> " << run.metrics(name).string() << "\n";
}

void cmd_summarize(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.run_dir};
  const fs::path dir = run.root / "eval";
  if (!fs::exists(dir)) throw DataError("missing " + dir.string() + "; run `trajeglish eval` first");
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "metrics.json")) names.push_back(e.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no metrics under " + dir.string() + "; run `trajeglish eval` first");
  std::vector<json> docs;
  std::set<std::string> keys;
  for (const auto& n : names) {
    std::ifstream in(dir / n / "metrics.json");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError((dir / n / "metrics.json").string() + ": " + e.what());
    }
    for (const auto& [k, v] : j.at("scalars").items()) keys.insert(k);
    docs.push_back(std::move(j));
  }
  std::ostringstream out;
  out.precision(10);
  out << "name";
  for (const auto& k : keys) out << ',' << k;
  out << '\n';
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << names[i].string();
    for (const auto& k : keys) {
      out << ',';
      const auto& s = docs[i]["scalars"];
      if (s.contains(k) && s[k]["value"].is_number()) out << s[k]["value"].get<double>();
    }
    out << '\n';
  }
  write_text(run.summary(), out.str());
  std::cout << "summarize: " << names.size() << " models -> " << run.summary().string() << "\n";
}

}  // namespace trajeglish
