#include "trajeglish/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"
#include "trajeglish/sampling.hpp"

namespace trajeglish {

int sample_token(const Eigen::VectorXd& logits, double temperature, double p_top, Rng& rng) {
  const auto p = softmax(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())), temperature);
  const auto q = nucleus(p, p_top);
  return static_cast<int>(rng.categorical(q));
}

std::string_view to_string(Controller c) {
  switch (c) {
    case Controller::kModel: return "model";
    case Controller::kReplay: return "replay";
    case Controller::kExternal: return "external";
  }
  return "?";
}

Controller controller_from_string(std::string_view s) {
  if (s == "model") return Controller::kModel;
  if (s == "replay") return Controller::kReplay;
  if (s == "external") return Controller::kExternal;
  throw ConfigError("unknown controller '" + std::string(s) + "' (expected model, replay or external)");
}

void RolloutConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("rollout.temperature must be > 0");
  if (!(p_top > 0.0) || p_top > 1.0) throw ConfigError("rollout.p_top must be in (0, 1]");
  if (n_rollouts < 1) throw ConfigError("rollout.n_rollouts must be >= 1");
  for (std::size_t k = 0; k < window.recompute_timesteps.size(); ++k) {
    const std::size_t t = window.recompute_timesteps[k];
    if (t < 1 || t >= horizon) throw ConfigError("rollout.window.recompute_timesteps must lie in [1, horizon)");
    if (k > 0 && t <= window.recompute_timesteps[k - 1]) {
      throw ConfigError("rollout.window.recompute_timesteps must be strictly increasing");
    }
  }
}

nlohmann::json RolloutConfig::to_json() const {
  return {{"temperature", temperature},
          {"p_top", p_top},
          {"horizon", horizon},
          {"n_rollouts", n_rollouts},
          {"seed", seed},
          {"workers", workers},
          {"context_steps", context_steps},
          {"window", {{"max_agents", window.max_agents}, {"recompute_timesteps", window.recompute_timesteps}}}};
}

RolloutConfig RolloutConfig::from_json(const nlohmann::json& j) {
  RolloutConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "temperature") c.temperature = v.get<double>();
      else if (k == "p_top") c.p_top = v.get<double>();
      else if (k == "horizon") c.horizon = v.get<std::size_t>();
      else if (k == "n_rollouts") c.n_rollouts = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "workers") c.workers = v.get<std::size_t>();
      else if (k == "context_steps") c.context_steps = v.get<std::size_t>();
      else if (k == "window") {
        for (const auto& [wk, wv] : v.items()) {
          if (wk == "max_agents") c.window.max_agents = wv.get<std::size_t>();
          else if (wk == "recompute_timesteps") c.window.recompute_timesteps = wv.get<std::vector<std::size_t>>();
          else throw ConfigError("unknown key '" + wk + "' in rollout.window");
        }
      } else {
        throw ConfigError("unknown key '" + k + "' in rollout");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rollout config: ") + e.what());
  }
  c.validate();
  return c;
}

SceneInit rollout_scene_init(const Scenario& sc, const std::vector<AgentState>& states,
                             const std::vector<std::size_t>& scenario_agents, std::size_t frame_slot,
                             std::size_t max_map_objects) {
  const AgentState frame = states.at(frame_slot);
  SceneInit init;
  for (std::size_t slot = 0; slot < scenario_agents.size(); ++slot) {
    init.agents.push_back({sc.agents.at(scenario_agents[slot]).meta, to_local(frame, states[slot])});
  }
  const double c = std::cos(frame.h), s = std::sin(frame.h);
  std::vector<MapObject> map;
  for (const auto& m : sc.map) {
    MapObject local{m.type, {}};
    for (const auto& p : m.points) {
      const double dx = p.x - frame.x, dy = p.y - frame.y;
      local.points.push_back({c * dx + s * dy, -s * dx + c * dy});
    }
    map.push_back(std::move(local));
  }
  init.map = nearest_map_objects(map, max_map_objects);
  return init;
}

struct RolloutEngine::Window {
  std::vector<std::size_t> slots;  // rollout-agent indices
  std::unique_ptr<IncrementalDecoder> dec;
};

namespace {

std::vector<std::size_t> default_order(const Scenario& sc, std::size_t t0) {
  std::size_t center = sc.agents.size();
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    if (sc.agents[i].sdc && sc.agents[i].states[t0].valid) center = i;
  }
  if (center == sc.agents.size()) {
    for (std::size_t i = 0; i < sc.agents.size() && center == sc.agents.size(); ++i) {
      if (sc.agents[i].states[t0].valid) center = i;
    }
  }
  if (center == sc.agents.size()) return {};
  std::vector<AgentState> pos;
  for (const auto& a : sc.agents) pos.push_back(a.states[t0]);
  return window_around(pos, center, sc.agents.size());
}

}  // namespace

RolloutEngine::RolloutEngine(const Model& model, const TemplateSet& ts, const Scenario& sc, std::size_t t0,
                             ControlAssignment control, std::vector<std::size_t> order, const RolloutConfig& cfg,
                             std::uint64_t seed)
    : model_(model), ts_(ts), sc_(sc), control_(std::move(control)), cfg_(cfg), rng_(seed) {
  cfg_.validate();
  const ModelConfig& mc = model.config();
  if (ts.size() != static_cast<std::size_t>(mc.vocab_size)) {
    throw ConfigError("template set size does not match the model vocabulary");
  }
  if (control_.controllers.size() != sc.agents.size()) {
    throw ConfigError("control assignment has " + std::to_string(control_.controllers.size()) +
                      " entries for " + std::to_string(sc.agents.size()) + " agents");
  }
  if (t0 >= sc.num_steps()) throw DataError("rollout initialization step is beyond the scenario");
  if (order.empty()) order = default_order(sc, t0);
  std::vector<std::size_t> agents;
  for (std::size_t i : order) {
    if (i >= sc.agents.size()) throw ConfigError("agent order refers to a missing agent");
    if (sc.agents[i].states[t0].valid) agents.push_back(i);
  }
  if (agents.empty()) throw DataError("no agent is valid at the rollout initialization step");
  bool model_seen = false;
  for (std::size_t i : agents) {
    const Controller c = control_.controllers[i];
    if (c == Controller::kModel) model_seen = true;
    if (c == Controller::kExternal) {
      if (model_seen) throw ConfigError("externally controlled agents must act before model agents");
      if (i >= control_.policies.size() || !control_.policies[i]) {
        throw ConfigError("external agent " + std::to_string(sc.agents[i].id) + " has no policy");
      }
    }
  }
  if (cfg_.window.max_agents > static_cast<std::size_t>(mc.max_agents)) {
    throw ConfigError("rollout.window.max_agents exceeds the model's max_agents");
  }
  window_size_ = cfg_.window.max_agents ? cfg_.window.max_agents : static_cast<std::size_t>(mc.max_agents);
  windowed_ = agents.size() > window_size_;

  const std::size_t n = agents.size();
  out_.t0 = t0;
  out_.seed = seed;
  out_.agents = agents;
  out_.tokens = TokenGrid(static_cast<int>(n), static_cast<int>(cfg_.horizon));
  out_.states.assign(n, std::vector<AgentState>(cfg_.horizon + 1, AgentState::invalid()));
  out_.log_probs.assign(n, std::vector<double>(cfg_.horizon, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t a = 0; a < n; ++a) out_.states[a][0] = sc.agents[agents[a]].states[t0];
  last_logits_.assign(n, Eigen::VectorXd());
  rebuild(0);
}

RolloutEngine::~RolloutEngine() = default;

void RolloutEngine::rebuild(std::size_t ctx) {
  const std::size_t base = k_ - ctx;
  const std::size_t n = out_.agents.size();
  std::vector<AgentState> pos(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t s = base + 1; s-- > 0;) {
      if (out_.states[a][s].valid) {
        pos[a] = out_.states[a][s];
        break;
      }
    }
  }
  std::vector<AgentWindow> layout;
  if (windowed_) {
    layout = select_windows(pos, window_size_, 0);
  } else {
    AgentWindow w;
    w.agents.resize(n);
    std::iota(w.agents.begin(), w.agents.end(), std::size_t{0});
    layout.push_back(std::move(w));
  }
  windows_.clear();
  for (const auto& w : layout) {
    auto win = std::make_unique<Window>();
    win->slots = w.agents;
    std::vector<std::size_t> ids;
    std::vector<AgentState> init_states;
    std::size_t frame_slot = 0;
    for (std::size_t slot = 0; slot < w.agents.size(); ++slot) {
      ids.push_back(out_.agents[w.agents[slot]]);
      init_states.push_back(pos[w.agents[slot]]);
      if (w.agents[slot] == w.center) frame_slot = slot;
    }
    const SceneInit init = rollout_scene_init(sc_, init_states, ids, frame_slot,
                                              static_cast<std::size_t>(model_.config().max_map_objects));
    win->dec = std::make_unique<IncrementalDecoder>(model_, init);
    for (std::size_t s = base; s < k_; ++s) {
      for (std::size_t slot = 0; slot < win->slots.size(); ++slot) {
        win->dec->append(static_cast<int>(slot), static_cast<int>(s - base),
                         out_.tokens.at(static_cast<int>(win->slots[slot]), static_cast<int>(s)));
      }
    }
    windows_.push_back(std::move(win));
  }
  base_ = base;
  out_.schedule.push_back({k_, base, layout});
}

AgentState RolloutEngine::choose_token(std::size_t a, std::size_t wi, std::size_t slot, int& token) {
  const std::size_t id = out_.agents[a];
  const AgentState& prev = out_.states[a][k_];
  const AgentMeta& meta = sc_.agents[id].meta;
  const Controller c = control_.controllers[id];
  if (c == Controller::kModel) {
    const Eigen::VectorXd logits =
        windows_[wi]->dec->predict(static_cast<int>(slot), static_cast<int>(k_ - base_));
    token = sample_token(logits, cfg_.temperature, cfg_.p_top, rng_);
    out_.log_probs[a][k_] =
        log_softmax_at(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())),
                       static_cast<std::size_t>(token));
    last_logits_[a] = logits;
    return render(prev, token, ts_);
  }
  AgentState raw;
  const std::size_t t = out_.t0 + k_ + 1;
  if (c == Controller::kReplay) {
    if (t >= sc_.num_steps()) {
      throw DataError("replay agent " + std::to_string(sc_.agents[id].id) + " has no logged state at step " +
                      std::to_string(t));
    }
    raw = sc_.agents[id].states[t];
  } else {
    StateGrid history(out_.agents.size());
    for (std::size_t b = 0; b < out_.agents.size(); ++b) {
      history[b].assign(out_.states[b].begin(), out_.states[b].begin() + static_cast<std::ptrdiff_t>(k_ + 1));
    }
    raw = control_.policies[id](a, t, history);
  }
  // Online chain tokenization keeps non-model agents inside the vocabulary.
  token = kInvalidToken;
  if (!raw.valid) return AgentState::invalid();
  if (!prev.valid) return raw;
  token = tokenize_step(prev, raw, meta, ts_);
  return render(prev, token, ts_);
}

void RolloutEngine::step() {
  if (k_ >= cfg_.horizon) throw std::logic_error("rollout horizon reached");
  const auto t_max = static_cast<std::size_t>(model_.config().max_timesteps);
  const std::size_t ctx = std::min({cfg_.context_steps, t_max - 1, k_});
  const bool recompute = windowed_ && std::binary_search(cfg_.window.recompute_timesteps.begin(),
                                                         cfg_.window.recompute_timesteps.end(), k_);
  if (recompute || k_ - base_ >= t_max) rebuild(ctx);

  std::vector<bool> acted(out_.agents.size(), false);
  for (std::size_t wi = 0; wi < windows_.size(); ++wi) {
    auto& w = *windows_[wi];
    for (std::size_t slot = 0; slot < w.slots.size(); ++slot) {
      const std::size_t a = w.slots[slot];
      if (!acted[a]) {
        int token = kInvalidToken;
        out_.states[a][k_ + 1] = choose_token(a, wi, slot, token);
        out_.tokens.at(static_cast<int>(a), static_cast<int>(k_)) = token;
        acted[a] = true;
      }
      w.dec->append(static_cast<int>(slot), static_cast<int>(k_ - base_),
                    out_.tokens.at(static_cast<int>(a), static_cast<int>(k_)));
    }
  }
  ++k_;
}

Rollout RolloutEngine::finish() && {
  out_.total_log_prob = 0.0;
  for (const auto& row : out_.log_probs) {
    for (double v : row) {
      if (!std::isnan(v)) out_.total_log_prob += v;
    }
  }
  return std::move(out_);
}

std::vector<Rollout> rollout(const Model& model, const TemplateSet& ts, const Scenario& sc, std::size_t t0,
                             const ControlAssignment& control, const RolloutConfig& cfg,
                             const std::vector<std::size_t>& order) {
  cfg.validate();
  std::vector<Rollout> out(cfg.n_rollouts);
  parallel_for(cfg.n_rollouts, cfg.workers, [&](std::size_t r) {
    RolloutEngine engine(model, ts, sc, t0, control, order, cfg, mix_seed(cfg.seed, r));
    for (std::size_t k = 0; k < cfg.horizon; ++k) engine.step();
    out[r] = std::move(engine).finish();
  });
  return out;
}

double teacher_forced_log_prob(const Model& model, const Scenario& sc, const Rollout& r) {
  if (r.schedule.size() != 1 || r.schedule[0].windows.size() != 1) {
    throw std::invalid_argument("teacher_forced_log_prob needs a single-window rollout without decoder rebuilds");
  }
  std::vector<AgentState> init_states;
  for (const auto& row : r.states) init_states.push_back(row[0]);
  const SceneInit init = rollout_scene_init(sc, init_states, r.agents, 0,
                                            static_cast<std::size_t>(model.config().max_map_objects));
  const auto lp = token_log_probs(model.logits(r.tokens, init), r.tokens);
  const int n = r.tokens.n_agents;
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    for (int t = 0; t < r.tokens.n_steps; ++t) {
      if (std::isnan(r.log_probs[static_cast<std::size_t>(a)][static_cast<std::size_t>(t)])) continue;
      total += lp[static_cast<std::size_t>(t * n + a)];
    }
  }
  return total;
}

nlohmann::json Rollout::to_json(const Scenario& sc, const RolloutConfig& cfg) const {
  nlohmann::json ids = nlohmann::json::array(), states_j = nlohmann::json::array(),
                 tokens_j = nlohmann::json::array(), lp_j = nlohmann::json::array();
  for (std::size_t a = 0; a < agents.size(); ++a) {
    ids.push_back(sc.agents[agents[a]].id);
    nlohmann::json srow = nlohmann::json::array(), trow = nlohmann::json::array(), lrow = nlohmann::json::array();
    for (const auto& s : states[a]) {
      srow.push_back(s.valid ? nlohmann::json::array({s.x, s.y, s.h}) : nlohmann::json(nullptr));
    }
    for (int t = 0; t < tokens.n_steps; ++t) trow.push_back(tokens.at(static_cast<int>(a), t));
    for (double v : log_probs[a]) lrow.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    states_j.push_back(std::move(srow));
    tokens_j.push_back(std::move(trow));
    lp_j.push_back(std::move(lrow));
  }
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& rec : schedule) {
    nlohmann::json ws = nlohmann::json::array();
    for (const auto& w : rec.windows) {
      nlohmann::json members = nlohmann::json::array();
      for (std::size_t a : w.agents) members.push_back(sc.agents[agents[a]].id);
      ws.push_back({{"center", sc.agents[agents[w.center]].id}, {"agents", members}, {"n_acted", w.n_acted}});
    }
    sched.push_back({{"step", rec.step}, {"init_step", rec.init_step}, {"windows", ws}});
  }
  return {{"scenario", sc.id},  {"t0", t0},         {"seed", seed},   {"agents", ids},
          {"tokens", tokens_j}, {"states", states_j}, {"log_probs", lp_j}, {"total_log_prob", total_log_prob},
          {"schedule", sched},  {"config", cfg.to_json()}};
}

void write_rollouts_jsonl(const std::filesystem::path& path, const Scenario& sc, const std::vector<Rollout>& rs,
                          const RolloutConfig& cfg) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write rollouts to " + path.string());
  for (const auto& r : rs) out << r.to_json(sc, cfg).dump() << '\n';
}

}  // namespace trajeglish
