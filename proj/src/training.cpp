#include "trajeglish/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"

namespace trajeglish {

TokenizedCorpus::TokenizedCorpus(Corpus corpus, TemplateSet templates, std::size_t workers)
    : corpus_(std::move(corpus)), templates_(std::move(templates)), chains_(corpus_.size()) {
  parallel_for(corpus_.size(), workers, [&](std::size_t s) {
    for (const auto& a : corpus_[s].agents) chains_[s].push_back(tokenize_trajectory(a.states, a.meta, templates_));
  });
}

std::vector<std::size_t> nearest_agents(const Scenario& sc, std::size_t t0, std::size_t center,
                                        std::size_t max_agents) {
  const AgentState& c = sc.agents.at(center).states.at(t0);
  if (!c.valid) throw DataError("nearest_agents: center agent is not valid at t0");
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    const AgentState& s = sc.agents[i].states[t0];
    if (!s.valid) continue;
    cand.emplace_back(i == center ? -1.0 : std::hypot(s.x - c.x, s.y - c.y), i);
  }
  std::sort(cand.begin(), cand.end());
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < std::min(max_agents, cand.size()); ++k) out.push_back(cand[k].second);
  return out;
}

std::optional<TrainingExample> make_example_at(const TokenizedCorpus& data, std::size_t scenario, std::size_t t0,
                                               int n_steps, std::size_t frame_agent,
                                               const std::vector<std::size_t>& order, const ModelConfig& cfg,
                                               const NoisyInputConfig& noisy, Rng& rng) {
  const Scenario& sc = data.scenarios().at(scenario);
  const auto& chains = data.chains(scenario);
  if (order.empty()) return std::nullopt;
  if (order.size() > static_cast<std::size_t>(cfg.max_agents)) {
    throw ConfigError("example has more agents than max_agents");
  }
  if (n_steps < 1 || n_steps > cfg.max_timesteps || t0 + static_cast<std::size_t>(n_steps) >= sc.num_steps()) {
    throw ConfigError("example window does not fit the scenario or the model");
  }
  TrainingExample ex;
  ex.scenario = scenario;
  ex.t0 = t0;
  ex.agents = order;
  ex.frame_agent = frame_agent;
  const AgentState frame = chains.at(frame_agent).snapped_states.at(t0);
  if (!frame.valid) throw DataError("frame agent is not valid at t0");
  for (std::size_t i : order) {
    const AgentState& s = chains[i].snapped_states[t0];
    if (!s.valid) throw DataError("example agent is not valid at t0");
    ex.init.agents.push_back({sc.agents[i].meta, to_local(frame, s)});
  }
  const double c = std::cos(frame.h), sn = std::sin(frame.h);
  std::vector<MapObject> map;
  map.reserve(sc.map.size());
  for (const auto& m : sc.map) {
    MapObject local{m.type, {}};
    local.points.reserve(m.points.size());
    for (const auto& p : m.points) {
      const double dx = p.x - frame.x, dy = p.y - frame.y;
      local.points.push_back({c * dx + sn * dy, -sn * dx + c * dy});
    }
    map.push_back(std::move(local));
  }
  ex.init.map = nearest_map_objects(map, static_cast<std::size_t>(cfg.max_map_objects));

  const int n = static_cast<int>(order.size());
  ex.targets = TokenGrid(n, n_steps);
  bool any = false;
  for (int slot = 0; slot < n; ++slot) {
    const auto& ids = chains[order[static_cast<std::size_t>(slot)]].token_ids;
    for (int k = 0; k < n_steps; ++k) {
      const int id = ids[t0 + 1 + static_cast<std::size_t>(k)];
      ex.targets.at(slot, k) = id;
      any = any || id != kInvalidToken;
    }
  }
  if (!any) return std::nullopt;
  ex.inputs = ex.targets;
  if (noisy.enabled) {
    for (int slot = 0; slot < n; ++slot) {
      const std::size_t a = order[static_cast<std::size_t>(slot)];
      const auto ids = noisy_chain_tokens(chains[a], sc.agents[a].states, sc.agents[a].meta, data.templates(),
                                          noisy.sigma, noisy.p_top, rng);
      for (int k = 0; k < n_steps; ++k) ex.inputs.at(slot, k) = ids[t0 + 1 + static_cast<std::size_t>(k)];
    }
  }
  return ex;
}

std::optional<TrainingExample> make_example(const TokenizedCorpus& data, std::size_t scenario,
                                            const ModelConfig& cfg, const ExampleOptions& opts, Rng& rng) {
  const Scenario& sc = data.scenarios().at(scenario);
  const std::size_t steps = sc.num_steps();
  if (steps < 2) return std::nullopt;
  const int want = opts.n_steps > 0 ? opts.n_steps : cfg.max_timesteps;
  const int t_len = std::min({want, cfg.max_timesteps, static_cast<int>(steps - 1)});
  const std::size_t t0 = opts.random_crop ? rng.index(steps - static_cast<std::size_t>(t_len)) : 0;
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    if (sc.agents[i].states[t0].valid) valid.push_back(i);
  }
  if (valid.empty()) return std::nullopt;
  std::size_t frame = valid.front();
  if (opts.random_frame) {
    frame = valid[rng.index(valid.size())];
  } else {
    for (std::size_t i : valid) {
      if (sc.agents[i].sdc) frame = i;
    }
  }
  auto order = nearest_agents(sc, t0, frame, static_cast<std::size_t>(cfg.max_agents));
  if (opts.random_order) rng.shuffle(order);
  return make_example_at(data, scenario, t0, t_len, frame, order, cfg, opts.noisy, rng);
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(optim.lr > 0.0)) throw ConfigError("train.optim.lr must be > 0");
  if (optim.beta1 < 0.0 || optim.beta1 >= 1.0 || optim.beta2 < 0.0 || optim.beta2 >= 1.0) {
    throw ConfigError("train.optim betas must be in [0, 1)");
  }
  if (optim.weight_decay < 0.0) throw ConfigError("train.optim.weight_decay must be >= 0");
  if (examples.n_steps < 0) throw ConfigError("train.examples.n_steps must be >= 0");
  if (examples.noisy.enabled && (!(examples.noisy.sigma > 0.0) || !(examples.noisy.p_top > 0.0) ||
                                 examples.noisy.p_top > 1.0)) {
    throw ConfigError("train.examples.noisy needs sigma > 0 and p_top in (0, 1]");
  }
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"workers", workers},
          {"log_every", log_every},
          {"optim",
           {{"lr", optim.lr},
            {"beta1", optim.beta1},
            {"beta2", optim.beta2},
            {"eps", optim.eps},
            {"weight_decay", optim.weight_decay},
            {"warmup_steps", optim.warmup_steps},
            {"total_steps", optim.total_steps},
            {"clip_norm", optim.clip_norm}}},
          {"examples",
           {{"n_steps", examples.n_steps},
            {"random_crop", examples.random_crop},
            {"random_frame", examples.random_frame},
            {"random_order", examples.random_order},
            {"noisy",
             {{"enabled", examples.noisy.enabled},
              {"sigma", examples.noisy.sigma},
              {"p_top", examples.noisy.p_top}}}}}};
}

namespace {

template <typename Fn>
void for_keys(const nlohmann::json& j, const std::string& where, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, v] : j.items()) {
    if (!fn(key, v)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  bool total_given = false;
  try {
    for_keys(j, "train", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "steps") c.steps = v.get<std::size_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "workers") c.workers = v.get<std::size_t>();
      else if (k == "log_every") c.log_every = v.get<std::size_t>();
      else if (k == "optim") {
        for_keys(v, "train.optim", [&](const std::string& ok, const nlohmann::json& ov) {
          if (ok == "lr") c.optim.lr = ov.get<double>();
          else if (ok == "beta1") c.optim.beta1 = ov.get<double>();
          else if (ok == "beta2") c.optim.beta2 = ov.get<double>();
          else if (ok == "eps") c.optim.eps = ov.get<double>();
          else if (ok == "weight_decay") c.optim.weight_decay = ov.get<double>();
          else if (ok == "warmup_steps") c.optim.warmup_steps = ov.get<std::size_t>();
          else if (ok == "total_steps") {
            c.optim.total_steps = ov.get<std::size_t>();
            total_given = true;
          } else if (ok == "clip_norm") c.optim.clip_norm = ov.get<double>();
          else return false;
          return true;
        });
      } else if (k == "examples") {
        for_keys(v, "train.examples", [&](const std::string& ek, const nlohmann::json& ev) {
          if (ek == "n_steps") c.examples.n_steps = ev.get<int>();
          else if (ek == "random_crop") c.examples.random_crop = ev.get<bool>();
          else if (ek == "random_frame") c.examples.random_frame = ev.get<bool>();
          else if (ek == "random_order") c.examples.random_order = ev.get<bool>();
          else if (ek == "noisy") {
            for_keys(ev, "train.examples.noisy", [&](const std::string& nk, const nlohmann::json& nv) {
              if (nk == "enabled") c.examples.noisy.enabled = nv.get<bool>();
              else if (nk == "sigma") c.examples.noisy.sigma = nv.get<double>();
              else if (nk == "p_top") c.examples.noisy.p_top = nv.get<double>();
              else return false;
              return true;
            });
          } else return false;
          return true;
        });
      } else return false;
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (!total_given) c.optim.total_steps = c.steps;
  c.validate();
  return c;
}

nlohmann::json TrainLogEntry::to_json() const {
  return {{"step", step}, {"loss", loss}, {"lr", lr}, {"tokens_seen", tokens_seen}, {"grad_norm", grad_norm}};
}

namespace {

TrainingExample draw_example(const TokenizedCorpus& data, const ModelConfig& cfg, const ExampleOptions& opts,
                             Rng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::size_t s = rng.index(data.size());
    if (auto ex = make_example(data, s, cfg, opts, rng)) return std::move(*ex);
  }
  throw DataError("could not draw a training example with a valid target in 64 attempts");
}

std::size_t count_valid(const TokenGrid& g) {
  return static_cast<std::size_t>(std::count_if(g.ids.begin(), g.ids.end(), [](int id) { return id >= 0; }));
}

}  // namespace

TrainResult train(Model& model, const TokenizedCorpus& data, const TrainConfig& cfg, const TrainCallback& on_step) {
  cfg.validate();
  if (data.size() == 0) throw DataError("training corpus is empty");
  if (data.templates().size() != static_cast<std::size_t>(model.config().vocab_size)) {
    throw ConfigError("template set has " + std::to_string(data.templates().size()) +
                      " entries but the model vocabulary is " + std::to_string(model.config().vocab_size));
  }
  nn::AdamW opt(model.params(), cfg.optim);
  TrainResult result;
  const std::size_t b = cfg.batch_size;
  std::vector<nn::Grads> grads(b, nn::Grads(model.params()));
  std::vector<double> losses(b);
  std::vector<std::size_t> counts(b);
  nn::Grads total(model.params());

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    parallel_for(b, cfg.workers, [&](std::size_t i) {
      Rng rng(mix_seed(cfg.seed, step * b + i));
      const TrainingExample ex = draw_example(data, model.config(), cfg.examples, rng);
      grads[i].zero();
      nn::Graph g(model.params(), &grads[i]);
      Rng drop = rng.fork(1);
      const auto logits = model.forward(g, ex.inputs, ex.init, model.config().dropout > 0.0 ? &drop : nullptr);
      const auto loss = g.cross_entropy(logits, ex.targets.flatten());
      losses[i] = g.value(loss)(0, 0);
      counts[i] = count_valid(ex.targets);
      g.backward(loss);
    });

    // Token-weighted mean over the batch, reduced in example order.
    std::size_t n_tok = 0;
    for (std::size_t c : counts) n_tok += c;
    total.zero();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double w = static_cast<double>(counts[i]) / static_cast<double>(n_tok);
      loss += w * losses[i];
      grads[i].scale(w);
      total.add(grads[i]);
    }
    const double gnorm = total.norm();
    if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": loss=" + std::to_string(loss) +
                         " grad_norm=" + std::to_string(gnorm) + " lr=" + std::to_string(scheduled_lr(cfg.optim, step)));
    }
    const double lr = opt.step(model.params(), total);
    result.tokens_seen += n_tok;
    const TrainLogEntry entry{step, loss, lr, result.tokens_seen, gnorm};
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) result.log.push_back(entry);
    if (on_step) on_step(entry);
  }
  return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write training log " + path.string());
  for (const auto& e : log) out << e.to_json().dump() << '\n';
}

double teacher_forced_accuracy(const Model& model, const std::vector<TrainingExample>& examples) {
  std::size_t hit = 0, n = 0;
  for (const auto& ex : examples) {
    const auto logits = model.logits(ex.inputs, ex.init);
    const auto flat = ex.targets.flatten();
    for (std::size_t r = 0; r < flat.size(); ++r) {
      if (flat[r] < 0) continue;
      Eigen::Index arg = 0;
      logits.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
      hit += arg == flat[r];
      ++n;
    }
  }
  if (n == 0) throw DataError("teacher_forced_accuracy: no valid targets");
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace trajeglish
