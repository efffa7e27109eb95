#include "trajeglish/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "trajeglish/error.hpp"

namespace trajeglish {

using nn::Graph;
using nn::Mat;

std::string_view to_string(MaskingRegime r) {
  switch (r) {
    case MaskingRegime::kFullIntra: return "full_intra";
    case MaskingRegime::kNoIntra: return "no_intra";
    case MaskingRegime::kMarginal: return "marginal";
    case MaskingRegime::kMarginalNoMap: return "marginal_no_map";
  }
  return "?";
}

MaskingRegime masking_regime_from_string(std::string_view s) {
  if (s == "full_intra") return MaskingRegime::kFullIntra;
  if (s == "no_intra") return MaskingRegime::kNoIntra;
  if (s == "marginal") return MaskingRegime::kMarginal;
  if (s == "marginal_no_map") return MaskingRegime::kMarginalNoMap;
  throw ConfigError("unknown masking regime '" + std::string(s) +
                    "' (expected full_intra, no_intra, marginal or marginal_no_map)");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(hidden_dim, "hidden_dim");
  positive(n_map_layers, "n_map_layers");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(n_heads, "n_heads");
  positive(max_agents, "max_agents");
  positive(max_timesteps, "max_timesteps");
  positive(max_map_objects, "max_map_objects");
  positive(max_map_segments, "max_map_segments");
  positive(n_latent_queries, "n_latent_queries");
  positive(mlp_ratio, "mlp_ratio");
  if (hidden_dim % n_heads != 0) throw ConfigError("model.hidden_dim must be divisible by model.n_heads");
  if (!(position_scale > 0.0)) throw ConfigError("model.position_scale must be > 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},         {"hidden_dim", hidden_dim},
          {"n_map_layers", n_map_layers},     {"n_enc_layers", n_enc_layers},
          {"n_dec_layers", n_dec_layers},     {"n_heads", n_heads},
          {"max_agents", max_agents},         {"max_timesteps", max_timesteps},
          {"max_map_objects", max_map_objects}, {"max_map_segments", max_map_segments},
          {"n_latent_queries", n_latent_queries}, {"mlp_ratio", mlp_ratio},
          {"position_scale", position_scale}, {"regime", std::string(to_string(regime))},
          {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "vocab_size") c.vocab_size = v.get<int>();
    else if (key == "hidden_dim") c.hidden_dim = v.get<int>();
    else if (key == "n_map_layers") c.n_map_layers = v.get<int>();
    else if (key == "n_enc_layers") c.n_enc_layers = v.get<int>();
    else if (key == "n_dec_layers") c.n_dec_layers = v.get<int>();
    else if (key == "n_heads") c.n_heads = v.get<int>();
    else if (key == "max_agents") c.max_agents = v.get<int>();
    else if (key == "max_timesteps") c.max_timesteps = v.get<int>();
    else if (key == "max_map_objects") c.max_map_objects = v.get<int>();
    else if (key == "max_map_segments") c.max_map_segments = v.get<int>();
    else if (key == "n_latent_queries") c.n_latent_queries = v.get<int>();
    else if (key == "mlp_ratio") c.mlp_ratio = v.get<int>();
    else if (key == "position_scale") c.position_scale = v.get<double>();
    else if (key == "regime") c.regime = masking_regime_from_string(v.get<std::string>());
    else if (key == "dropout") c.dropout = v.get<double>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::vector<MapObject> nearest_map_objects(const std::vector<MapObject>& map, std::size_t limit) {
  if (map.size() <= limit) return map;
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t k = 0; k < map.size(); ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : map[k].points) best = std::min(best, std::hypot(p.x, p.y));
    d.emplace_back(best, k);
  }
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < limit; ++k) keep.push_back(d[k].second);
  std::sort(keep.begin(), keep.end());
  std::vector<MapObject> out;
  for (std::size_t k : keep) out.push_back(map[k]);
  return out;
}

SceneInit make_scene_init(const Scenario& sc, std::size_t t0, const std::vector<std::size_t>& order,
                          const AgentState& frame) {
  SceneInit init;
  for (std::size_t i : order) {
    const auto& a = sc.agents.at(i);
    if (t0 >= a.states.size() || !a.states[t0].valid) {
      throw DataError("make_scene_init: agent " + std::to_string(a.id) + " is not valid at the initial step");
    }
    init.agents.push_back({a.meta, to_local(frame, a.states[t0])});
  }
  const double c = std::cos(frame.h), s = std::sin(frame.h);
  for (const auto& m : sc.map) {
    MapObject local{m.type, {}};
    for (const auto& p : m.points) {
      const double dx = p.x - frame.x, dy = p.y - frame.y;
      local.points.push_back({c * dx + s * dy, -s * dx + c * dy});
    }
    init.map.push_back(std::move(local));
  }
  return init;
}

std::vector<int> TokenGrid::flatten() const {
  std::vector<int> out(ids.size());
  for (int t = 0; t < n_steps; ++t) {
    for (int i = 0; i < n_agents; ++i) out[static_cast<std::size_t>(t) * n_agents + i] = at(i, t);
  }
  return out;
}

bool visible(MaskingRegime regime, int n_agents, int p, int q) {
  const int tp = p / n_agents, ip = p % n_agents;
  const int tq = q / n_agents, iq = q % n_agents;
  switch (regime) {
    case MaskingRegime::kFullIntra: return q < p;
    case MaskingRegime::kNoIntra: return tq < tp;
    case MaskingRegime::kMarginal:
    case MaskingRegime::kMarginalNoMap: return iq == ip && tq < tp;
  }
  return false;
}

nn::Mask build_mask(MaskingRegime regime, int n_agents, int n_steps) {
  if (n_agents < 1 || n_steps < 1) throw std::invalid_argument("build_mask: N and T must be >= 1");
  const int s = n_agents * n_steps;
  nn::Mask m(s, s);
  for (int p = 0; p < s; ++p) {
    for (int q = 0; q < s; ++q) m.set(p, q, visible(regime, n_agents, p, q));
  }
  return m;
}

namespace {
constexpr double kInitStd = 0.02;
constexpr int kAgentFeatures = 6 + static_cast<int>(kNumAgentClasses);
constexpr int kSegmentFeatures = 4 + static_cast<int>(kNumMapObjectTypes);
}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build(seed);
  bind();
}

Model::Model(ModelConfig cfg, nn::ParamStore params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const Model reference(cfg_, std::uint64_t{0});
  const auto& ref = reference.params_;
  if (ref.size() != params_.size()) {
    throw DataError("model parameters do not match the config: expected " + std::to_string(ref.size()) +
                    " arrays, got " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& want = ref[i];
    if (!params_.contains(want.name)) throw DataError("model parameters lack '" + want.name + "'");
    const auto& got = params_[static_cast<std::size_t>(params_.index(want.name))].value;
    if (got.rows() != want.value.rows() || got.cols() != want.value.cols()) {
      throw DataError("parameter '" + want.name + "' has shape " + std::to_string(got.rows()) + "x" +
                      std::to_string(got.cols()) + ", expected " + std::to_string(want.value.rows()) + "x" +
                      std::to_string(want.value.cols()));
    }
  }
  bind();
}

void Model::build(std::uint64_t seed) {
  Rng rng(seed);
  const int c = cfg_.hidden_dim, h = cfg_.hidden_dim * cfg_.mlp_ratio;
  auto w = [&](const std::string& n, int r, int k) { params_.add_normal(n, r, k, kInitStd, rng); };
  auto zeros = [&](const std::string& n, int k) { params_.add_constant(n, 1, k, 0.0); };
  auto ones = [&](const std::string& n, int k) { params_.add_constant(n, 1, k, 1.0); };
  auto attn = [&](const std::string& p) {
    w(p + ".wq", c, c);
    w(p + ".wk", c, c);
    w(p + ".wv", c, c);
    w(p + ".wo", c, c);
    zeros(p + ".bo", c);
  };
  auto block = [&](const std::string& p) {
    ones(p + ".ln1.g", c);
    zeros(p + ".ln1.b", c);
    attn(p + ".attn");
    ones(p + ".ln2.g", c);
    zeros(p + ".ln2.b", c);
    w(p + ".mlp.w1", c, h);
    zeros(p + ".mlp.b1", h);
    w(p + ".mlp.w2", h, c);
    zeros(p + ".mlp.b2", c);
  };

  w("enc.agent.w", kAgentFeatures, c);
  zeros("enc.agent.b", c);
  if (cfg_.uses_order()) w("enc.order", cfg_.max_agents, c);
  if (cfg_.regime != MaskingRegime::kMarginalNoMap) {
    w("enc.seg1.w", kSegmentFeatures, c);
    zeros("enc.seg1.b", c);
    w("enc.seg2.w", c, c);
    zeros("enc.seg2.b", c);
    w("enc.map_type", static_cast<int>(kNumMapObjectTypes), c);
    for (int l = 0; l < cfg_.n_map_layers; ++l) block("enc.map" + std::to_string(l));
  }
  for (int l = 0; l < cfg_.n_enc_layers; ++l) block("enc.layer" + std::to_string(l));
  w("enc.latent.queries", cfg_.n_latent_queries, c);
  ones("enc.latent.ln_q.g", c);
  zeros("enc.latent.ln_q.b", c);
  ones("enc.latent.ln_kv.g", c);
  zeros("enc.latent.ln_kv.b", c);
  attn("enc.latent.attn");
  ones("enc.latent.ln_mlp.g", c);
  zeros("enc.latent.ln_mlp.b", c);
  w("enc.latent.mlp.w1", c, h);
  zeros("enc.latent.mlp.b1", h);
  w("enc.latent.mlp.w2", h, c);
  zeros("enc.latent.mlp.b2", c);
  ones("enc.ln.g", c);
  zeros("enc.ln.b", c);

  w("dec.token", cfg_.vocab_size + 1, c);  // last row is the start token
  w("dec.time", cfg_.max_timesteps, c);
  if (cfg_.uses_order()) w("dec.order", cfg_.max_agents, c);
  w("dec.agent_proj", c, c);
  w("dec.query", 1, c);
  for (int l = 0; l < cfg_.n_dec_layers; ++l) {
    const std::string p = "dec.layer" + std::to_string(l);
    ones(p + ".ln_self.g", c);
    zeros(p + ".ln_self.b", c);
    attn(p + ".self");
    // Heads start with own-agent score offsets spread over [0, 8).
    const int same = params_.add_constant(p + ".self.same_agent", 1, cfg_.n_heads, 0.0);
    for (int hd = 0; hd < cfg_.n_heads; ++hd) params_[static_cast<std::size_t>(same)].value(0, hd) = 8.0 * hd / cfg_.n_heads;
    ones(p + ".ln_cross.g", c);
    zeros(p + ".ln_cross.b", c);
    attn(p + ".cross");
    ones(p + ".ln_mlp.g", c);
    zeros(p + ".ln_mlp.b", c);
    w(p + ".mlp.w1", c, h);
    zeros(p + ".mlp.b1", h);
    w(p + ".mlp.w2", h, c);
    zeros(p + ".mlp.b2", c);
  }
  ones("dec.ln.g", c);
  zeros("dec.ln.b", c);
}

Model::AttnIds Model::attn_ids(const std::string& p) const {
  return {params_.index(p + ".wq"), params_.index(p + ".wk"), params_.index(p + ".wv"), params_.index(p + ".wo"),
          params_.index(p + ".bo")};
}

Model::BlockIds Model::block_ids(const std::string& p) const {
  return {params_.index(p + ".ln1.g"),     params_.index(p + ".ln1.b"),     params_.index(p + ".ln2.g"),
          params_.index(p + ".ln2.b"),     attn_ids(p + ".attn"),           params_.index(p + ".mlp.w1"),
          params_.index(p + ".mlp.b1"),    params_.index(p + ".mlp.w2"),    params_.index(p + ".mlp.b2")};
}

void Model::bind() {
  const auto& p = params_;
  try {
    agent_in_w_ = p.index("enc.agent.w");
    agent_in_b_ = p.index("enc.agent.b");
    enc_order_ = cfg_.uses_order() ? p.index("enc.order") : -1;
    map_blocks_.clear();
    enc_blocks_.clear();
    dec_blocks_.clear();
    if (cfg_.regime != MaskingRegime::kMarginalNoMap) {
      seg1_w_ = p.index("enc.seg1.w");
      seg1_b_ = p.index("enc.seg1.b");
      seg2_w_ = p.index("enc.seg2.w");
      seg2_b_ = p.index("enc.seg2.b");
      map_type_ = p.index("enc.map_type");
      for (int l = 0; l < cfg_.n_map_layers; ++l) map_blocks_.push_back(block_ids("enc.map" + std::to_string(l)));
    }
    for (int l = 0; l < cfg_.n_enc_layers; ++l) enc_blocks_.push_back(block_ids("enc.layer" + std::to_string(l)));
    latents_ = p.index("enc.latent.queries");
    lat_ln_q_g_ = p.index("enc.latent.ln_q.g");
    lat_ln_q_b_ = p.index("enc.latent.ln_q.b");
    lat_ln_kv_g_ = p.index("enc.latent.ln_kv.g");
    lat_ln_kv_b_ = p.index("enc.latent.ln_kv.b");
    lat_attn_ = attn_ids("enc.latent.attn");
    lat_ln_mlp_g_ = p.index("enc.latent.ln_mlp.g");
    lat_ln_mlp_b_ = p.index("enc.latent.ln_mlp.b");
    lat_w1_ = p.index("enc.latent.mlp.w1");
    lat_b1_ = p.index("enc.latent.mlp.b1");
    lat_w2_ = p.index("enc.latent.mlp.w2");
    lat_b2_ = p.index("enc.latent.mlp.b2");
    enc_ln_g_ = p.index("enc.ln.g");
    enc_ln_b_ = p.index("enc.ln.b");
    token_table_ = p.index("dec.token");
    time_emb_ = p.index("dec.time");
    dec_order_ = cfg_.uses_order() ? p.index("dec.order") : -1;
    agent_proj_ = p.index("dec.agent_proj");
    query_emb_ = p.index("dec.query");
    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string q = "dec.layer" + std::to_string(l);
      dec_blocks_.push_back({p.index(q + ".ln_self.g"), p.index(q + ".ln_self.b"), p.index(q + ".ln_cross.g"),
                             p.index(q + ".ln_cross.b"), p.index(q + ".ln_mlp.g"), p.index(q + ".ln_mlp.b"),
                             attn_ids(q + ".self"), attn_ids(q + ".cross"), p.index(q + ".mlp.w1"),
                             p.index(q + ".mlp.b1"), p.index(q + ".mlp.w2"), p.index(q + ".mlp.b2"),
                             p.index(q + ".self.same_agent")});
    }
    out_ln_g_ = p.index("dec.ln.g");
    out_ln_b_ = p.index("dec.ln.b");
  } catch (const std::out_of_range& e) {
    throw DataError(std::string("model parameters do not match the config: ") + e.what());
  }
}

void Model::check_inputs(const TokenGrid& inputs, const SceneInit& init) const {
  const int n = static_cast<int>(init.agents.size());
  if (n < 1) throw ConfigError("scene has no agents");
  if (n > cfg_.max_agents) {
    throw ConfigError("scene has " + std::to_string(n) + " agents, more than max_agents=" +
                      std::to_string(cfg_.max_agents) + "; window the scene first");
  }
  if (init.map.size() > static_cast<std::size_t>(cfg_.max_map_objects)) {
    throw ConfigError("scene has " + std::to_string(init.map.size()) + " map objects, more than max_map_objects=" +
                      std::to_string(cfg_.max_map_objects));
  }
  if (inputs.n_agents != n) throw ConfigError("token grid agent count does not match the scene");
  if (inputs.n_steps < 1 || inputs.n_steps > cfg_.max_timesteps) {
    throw ConfigError("token grid has " + std::to_string(inputs.n_steps) + " steps; expected 1.." +
                      std::to_string(cfg_.max_timesteps));
  }
  for (int id : inputs.ids) {
    if (id >= cfg_.vocab_size) throw ConfigError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  for (const auto& a : init.agents) {
    if (!a.init.valid) throw DataError("scene agent has an invalid initial state");
  }
}

Graph::Id Model::mlp(Graph& g, int w1, int b1, int w2, int b2, Graph::Id x, Rng* rng) const {
  Graph::Id h = g.gelu(g.linear(x, g.param(w1), g.param(b1)));
  h = g.linear(h, g.param(w2), g.param(b2));
  return rng ? g.dropout(h, cfg_.dropout, *rng) : h;
}

Graph::Id Model::attend(Graph& g, const AttnIds& a, Graph::Id q_in, Graph::Id kv_in, const nn::Mask* mask,
                        Rng* rng, int bias, const nn::Mask* bias_where) const {
  const Graph::Id q = g.matmul(q_in, g.param(a.wq));
  const Graph::Id k = g.matmul(kv_in, g.param(a.wk));
  const Graph::Id v = g.matmul(kv_in, g.param(a.wv));
  Graph::Id o = g.attention(q, k, v, mask, cfg_.n_heads, bias >= 0 ? g.param(bias) : -1, bias_where);
  o = g.linear(o, g.param(a.wo), g.param(a.bo));
  return rng ? g.dropout(o, cfg_.dropout, *rng) : o;
}

Graph::Id Model::self_block(Graph& g, const BlockIds& b, Graph::Id x, Rng* rng) const {
  const Graph::Id xn = g.layer_norm(x, g.param(b.ln1_g), g.param(b.ln1_b));
  x = g.add(x, attend(g, b.attn, xn, xn, nullptr, rng));
  const Graph::Id xm = g.layer_norm(x, g.param(b.ln2_g), g.param(b.ln2_b));
  return g.add(x, mlp(g, b.w1, b.b1, b.w2, b.b2, xm, rng));
}

Graph::Id Model::encode(Graph& g, const SceneInit& init, Rng* rng) const {
  const int n = static_cast<int>(init.agents.size());
  const double s = cfg_.position_scale;
  Mat feats(n, kAgentFeatures);
  feats.setZero();
  for (int i = 0; i < n; ++i) {
    const auto& a = init.agents[static_cast<std::size_t>(i)];
    feats(i, 0) = a.init.x / s;
    feats(i, 1) = a.init.y / s;
    feats(i, 2) = std::cos(a.init.h);
    feats(i, 3) = std::sin(a.init.h);
    feats(i, 4) = a.meta.length() / 5.0;
    feats(i, 5) = a.meta.width() / 5.0;
    feats(i, 6 + static_cast<int>(a.meta.cls())) = 1.0;
  }
  Graph::Id agents = g.gelu(g.linear(g.constant(std::move(feats)), g.param(agent_in_w_), g.param(agent_in_b_)));
  if (cfg_.uses_order()) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    agents = g.add(agents, g.embed(g.param(enc_order_), idx));
  }

  std::vector<Graph::Id> tokens;
  if (cfg_.regime != MaskingRegime::kMarginalNoMap) {
    std::vector<double> rows;
    std::vector<int> offsets{0};
    std::vector<int> types;
    for (const auto& obj : init.map) {
      if (obj.points.empty()) continue;
      std::vector<Vec2> pts = obj.points;
      if (pts.size() == 1) pts.push_back(pts[0]);
      const std::size_t segs = pts.size() - 1;
      const std::size_t keep = std::min<std::size_t>(segs, static_cast<std::size_t>(cfg_.max_map_segments));
      for (std::size_t k = 0; k < keep; ++k) {
        // Evenly spaced point indices when resampling.
        const std::size_t a = k * segs / keep;
        const std::size_t b = (k + 1) * segs / keep;
        const double f[4] = {pts[a].x / s, pts[a].y / s, pts[b].x / s, pts[b].y / s};
        rows.insert(rows.end(), f, f + 4);
        for (std::size_t t = 0; t < kNumMapObjectTypes; ++t) {
          rows.push_back(static_cast<std::size_t>(obj.type) == t ? 1.0 : 0.0);
        }
      }
      offsets.push_back(offsets.back() + static_cast<int>(keep));
      types.push_back(static_cast<int>(obj.type));
    }
    if (!types.empty()) {
      Mat seg = Eigen::Map<Mat>(rows.data(), offsets.back(), kSegmentFeatures);
      Graph::Id h = g.gelu(g.linear(g.constant(std::move(seg)), g.param(seg1_w_), g.param(seg1_b_)));
      h = g.linear(h, g.param(seg2_w_), g.param(seg2_b_));
      Graph::Id poly = g.add(g.max_pool_groups(h, offsets), g.embed(g.param(map_type_), types));
      for (const auto& b : map_blocks_) poly = self_block(g, b, poly, rng);
      tokens.push_back(poly);
    }
  }
  const int n_map = tokens.empty() ? 0 : static_cast<int>(g.value(tokens[0]).rows());
  tokens.push_back(agents);
  Graph::Id x = g.concat_rows(tokens);
  for (const auto& b : enc_blocks_) x = self_block(g, b, x, rng);

  Graph::Id lat = g.param(latents_);
  const Graph::Id qn = g.layer_norm(lat, g.param(lat_ln_q_g_), g.param(lat_ln_q_b_));
  const Graph::Id kvn = g.layer_norm(x, g.param(lat_ln_kv_g_), g.param(lat_ln_kv_b_));
  lat = g.add(lat, attend(g, lat_attn_, qn, kvn, nullptr, rng));
  const Graph::Id lm = g.layer_norm(lat, g.param(lat_ln_mlp_g_), g.param(lat_ln_mlp_b_));
  lat = g.add(lat, mlp(g, lat_w1_, lat_b1_, lat_w2_, lat_b2_, lm, rng));

  const Graph::Id agent_rows = g.slice_rows(x, n_map, n);
  const Graph::Id out = g.concat_rows({lat, agent_rows});
  return g.layer_norm(out, g.param(enc_ln_g_), g.param(enc_ln_b_));
}

Graph::Id Model::forward(Graph& g, const TokenGrid& inputs, const SceneInit& init, Rng* rng) const {
  check_inputs(inputs, init);
  const int n = inputs.n_agents, t_steps = inputs.n_steps, s = n * t_steps;
  const int lq = cfg_.n_latent_queries;
  const Graph::Id enc = encode(g, init, rng);

  // Per-position identity: time + agent vector (+ order).
  std::vector<int> agent_of(static_cast<std::size_t>(s)), time_of(static_cast<std::size_t>(s));
  for (int p = 0; p < s; ++p) {
    agent_of[static_cast<std::size_t>(p)] = p % n;
    time_of[static_cast<std::size_t>(p)] = p / n;
  }
  const Graph::Id agent_vec = g.matmul(g.slice_rows(enc, lq, n), g.param(agent_proj_));
  Graph::Id base = g.add(g.embed(g.param(time_emb_), time_of), g.gather_rows(agent_vec, agent_of));
  if (cfg_.uses_order()) base = g.add(base, g.embed(g.param(dec_order_), agent_of));

  const Graph::Id table = g.param(token_table_);
  const Graph::Id start = g.embed(table, {cfg_.vocab_size});
  const Graph::Id content = g.concat_rows({start, g.add(g.embed(table, inputs.flatten()), base)});
  const Graph::Id query = g.add_row(base, g.param(query_emb_));

  // Rows 0..s are the content stream (row 0 = start), rows s+1..2s the query stream.
  nn::Mask mask(2 * s + 1, s + 1);
  mask.set(0, 0, true);
  for (int p = 0; p < s; ++p) {
    mask.set(1 + p, 0, true);
    mask.set(1 + p, 1 + p, true);
    mask.set(1 + s + p, 0, true);
    for (int q = 0; q < s; ++q) {
      if (visible(cfg_.regime, n, p, q)) {
        mask.set(1 + p, 1 + q, true);
        mask.set(1 + s + p, 1 + q, true);
      }
    }
  }
  nn::Mask query_mask(s, s + 1);
  for (int p = 0; p < s; ++p) {
    for (int q = 0; q <= s; ++q) query_mask.set(p, q, mask(1 + s + p, q));
  }
  // Same-agent pairs for the attention score bias; the start row has no agent.
  nn::Mask same(2 * s + 1, s + 1), query_same(s, s + 1);
  for (int p = 0; p < s; ++p) {
    for (int q = 0; q < s; ++q) {
      if (p % n != q % n) continue;
      same.set(1 + p, 1 + q, true);
      same.set(1 + s + p, 1 + q, true);
      query_same.set(p, 1 + q, true);
    }
  }

  Graph::Id h = g.concat_rows({content, query});
  const int layers = static_cast<int>(dec_blocks_.size());
  for (int l = 0; l < layers; ++l) {
    const auto& b = dec_blocks_[static_cast<std::size_t>(l)];
    const bool last = l == layers - 1;
    if (last) {
      // The content stream is not read after the final layer.
      const Graph::Id hn = g.layer_norm(h, g.param(b.ln_self_g), g.param(b.ln_self_b));
      const Graph::Id kv = g.slice_rows(hn, 0, s + 1);
      const Graph::Id qn = g.slice_rows(hn, s + 1, s);
      h = g.add(g.slice_rows(h, s + 1, s), attend(g, b.self_attn, qn, kv, &query_mask, rng, b.same_agent, &query_same));
    } else {
      const Graph::Id hn = g.layer_norm(h, g.param(b.ln_self_g), g.param(b.ln_self_b));
      const Graph::Id kv = g.slice_rows(hn, 0, s + 1);
      h = g.add(h, attend(g, b.self_attn, hn, kv, &mask, rng, b.same_agent, &same));
    }
    const Graph::Id cn = g.layer_norm(h, g.param(b.ln_cross_g), g.param(b.ln_cross_b));
    h = g.add(h, attend(g, b.cross_attn, cn, enc, nullptr, rng));
    const Graph::Id mn = g.layer_norm(h, g.param(b.ln_mlp_g), g.param(b.ln_mlp_b));
    h = g.add(h, mlp(g, b.w1, b.b1, b.w2, b.b2, mn, rng));
  }
  const Graph::Id out = g.layer_norm(h, g.param(out_ln_g_), g.param(out_ln_b_));
  // Tied output: logits against the first |V| rows of the token table.
  return g.matmul_nt(out, g.slice_rows(table, 0, cfg_.vocab_size));
}

Mat Model::encode_scene(const SceneInit& init) const {
  Graph g(params_);
  if (init.agents.size() > static_cast<std::size_t>(cfg_.max_agents)) {
    throw ConfigError("scene has more agents than max_agents");
  }
  if (init.map.size() > static_cast<std::size_t>(cfg_.max_map_objects)) {
    throw ConfigError("scene has more map objects than max_map_objects");
  }
  return g.value(encode(g, init));
}

Mat Model::logits(const TokenGrid& inputs, const SceneInit& init) const {
  Graph g(params_);
  return g.value(forward(g, inputs, init));
}

std::vector<double> token_log_probs(const Mat& logits, const TokenGrid& targets) {
  const auto flat = targets.flatten();
  if (static_cast<Eigen::Index>(flat.size()) != logits.rows()) {
    throw std::invalid_argument("token_log_probs: logits rows do not match targets");
  }
  std::vector<double> out(flat.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < flat.size(); ++r) {
    if (flat[r] < 0) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(r));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    out[r] = row(flat[r]) - lse;
  }
  return out;
}

double token_loss(const Mat& logits, const TokenGrid& targets) {
  const auto lp = token_log_probs(logits, targets);
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : lp) {
    if (std::isnan(v)) continue;
    sum -= v;
    ++n;
  }
  if (n == 0) throw DataError("token_loss: no valid target positions");
  return sum / static_cast<double>(n);
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

Eigen::RowVectorXd layer_norm_row(const Eigen::RowVectorXd& x, const Mat& gain, const Mat& bias) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  return ((x.array() - mean) / std::sqrt(var + 1e-5)) * gain.row(0).array() + bias.row(0).array();
}

Eigen::RowVectorXd gelu_row(const Eigen::RowVectorXd& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

// Single-query multi-head attention over the selected rows of K and V. Rows
// flagged in `own` get the per-head score offset `bias` (1 x heads).
Eigen::RowVectorXd attend_row(const Eigen::RowVectorXd& q, const Mat& k, const Mat& v,
                              const std::vector<Eigen::Index>& rows, int heads, const Mat* bias = nullptr,
                              const std::vector<bool>* own = nullptr) {
  const Eigen::Index c = q.size(), d = c / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(c);
  if (rows.empty()) return out;
  Eigen::VectorXd score(static_cast<Eigen::Index>(rows.size()));
  for (int h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < rows.size(); ++j) {
      score(static_cast<Eigen::Index>(j)) = q.segment(h * d, d).dot(k.row(rows[j]).segment(h * d, d)) * inv;
      if (bias && (*own)[j]) score(static_cast<Eigen::Index>(j)) += (*bias)(0, h);
    }
    const double mx = score.maxCoeff();
    const Eigen::VectorXd p = (score.array() - mx).exp();
    const double z = p.sum();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      out.segment(h * d, d) += (p(static_cast<Eigen::Index>(j)) / z) * v.row(rows[j]).segment(h * d, d);
    }
  }
  return out;
}

void append_row(Mat& m, const Eigen::RowVectorXd& row) {
  m.conservativeResize(m.rows() + 1, Eigen::NoChange);
  m.row(m.rows() - 1) = row;
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const Model& model, const SceneInit& init)
    : model_(model), n_agents_(static_cast<int>(init.agents.size())) {
  const auto& cfg = model.cfg_;
  const auto& P = model.params_;
  TokenGrid probe(n_agents_, 1);
  model.check_inputs(probe, init);
  const Mat enc = model.encode_scene(init);
  const int lq = cfg.n_latent_queries;
  agent_vec_ = enc.middleRows(lq, n_agents_) * P[static_cast<std::size_t>(model.agent_proj_)].value;

  const std::size_t layers = model.dec_blocks_.size();
  cross_k_.resize(layers);
  cross_v_.resize(layers);
  k_.resize(layers);
  v_.resize(layers);
  const Eigen::RowVectorXd start = P[static_cast<std::size_t>(model.token_table_)].value.row(cfg.vocab_size);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& b = model.dec_blocks_[l];
    cross_k_[l] = enc * P[static_cast<std::size_t>(b.cross_attn.wk)].value;
    cross_v_[l] = enc * P[static_cast<std::size_t>(b.cross_attn.wv)].value;
    k_[l].resize(0, cfg.hidden_dim);
    v_[l].resize(0, cfg.hidden_dim);
  }
  append_content(start, -1, -1);
}

Eigen::RowVectorXd IncrementalDecoder::base_row(int agent, int t) const {
  const auto& cfg = model_.cfg_;
  const auto& P = model_.params_;
  if (agent < 0 || agent >= n_agents_) throw std::out_of_range("IncrementalDecoder: agent index out of range");
  if (t < 0 || t >= cfg.max_timesteps) throw ConfigError("IncrementalDecoder: step exceeds max_timesteps");
  Eigen::RowVectorXd row = P[static_cast<std::size_t>(model_.time_emb_)].value.row(t) + agent_vec_.row(agent);
  if (cfg.uses_order()) row += P[static_cast<std::size_t>(model_.dec_order_)].value.row(agent);
  return row;
}

bool IncrementalDecoder::sees(int agent, int t, std::size_t row) const {
  if (row == 0) return true;
  const int p = t * n_agents_ + agent;
  const int q = pos_t_[row - 1] * n_agents_ + pos_agent_[row - 1];
  return visible(model_.cfg_.regime, n_agents_, p, q);
}

Eigen::RowVectorXd IncrementalDecoder::run_layer_tail(std::size_t l, Eigen::RowVectorXd x) const {
  const auto& P = model_.params_;
  const auto& b = model_.dec_blocks_[l];
  const int heads = model_.cfg_.n_heads;
  auto val = [&](int id) -> const Mat& { return P[static_cast<std::size_t>(id)].value; };
  const Eigen::RowVectorXd cn = layer_norm_row(x, val(b.ln_cross_g), val(b.ln_cross_b));
  std::vector<Eigen::Index> all(static_cast<std::size_t>(cross_k_[l].rows()));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  const Eigen::RowVectorXd cq = cn * val(b.cross_attn.wq);
  x += attend_row(cq, cross_k_[l], cross_v_[l], all, heads) * val(b.cross_attn.wo) + val(b.cross_attn.bo).row(0);
  const Eigen::RowVectorXd mn = layer_norm_row(x, val(b.ln_mlp_g), val(b.ln_mlp_b));
  const Eigen::RowVectorXd hid = gelu_row(mn * val(b.w1) + val(b.b1).row(0));
  x += hid * val(b.w2) + val(b.b2).row(0);
  return x;
}

void IncrementalDecoder::append_content(Eigen::RowVectorXd x, int agent, int t) {
  const auto& P = model_.params_;
  const int heads = model_.cfg_.n_heads;
  auto val = [&](int id) -> const Mat& { return P[static_cast<std::size_t>(id)].value; };
  if (agent >= 0) {
    pos_agent_.push_back(agent);
    pos_t_.push_back(t);
  }
  const std::size_t self_row = pos_agent_.size();  // index in the cache (row 0 = start)
  std::vector<Eigen::Index> rows;
  std::vector<bool> own;
  for (std::size_t r = 0; r <= self_row; ++r) {
    if (r == self_row || agent < 0 || sees(agent, t, r)) {
      rows.push_back(static_cast<Eigen::Index>(r));
      own.push_back(agent >= 0 && r > 0 && pos_agent_[r - 1] == agent);
    }
  }
  const std::size_t layers = model_.dec_blocks_.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& b = model_.dec_blocks_[l];
    const Eigen::RowVectorXd xn = layer_norm_row(x, val(b.ln_self_g), val(b.ln_self_b));
    append_row(k_[l], xn * val(b.self_attn.wk));
    append_row(v_[l], xn * val(b.self_attn.wv));
    if (l + 1 == layers) break;
    const Eigen::RowVectorXd q = xn * val(b.self_attn.wq);
    x += attend_row(q, k_[l], v_[l], rows, heads, &val(b.same_agent), &own) * val(b.self_attn.wo) +
         val(b.self_attn.bo).row(0);
    x = run_layer_tail(l, std::move(x));
  }
}

Eigen::VectorXd IncrementalDecoder::predict(int agent, int t) const {
  const auto& P = model_.params_;
  const auto& cfg = model_.cfg_;
  auto val = [&](int id) -> const Mat& { return P[static_cast<std::size_t>(id)].value; };
  Eigen::RowVectorXd x = base_row(agent, t) + val(model_.query_emb_).row(0);
  std::vector<Eigen::Index> rows;
  std::vector<bool> own;
  for (std::size_t r = 0; r <= pos_agent_.size(); ++r) {
    if (sees(agent, t, r)) {
      rows.push_back(static_cast<Eigen::Index>(r));
      own.push_back(r > 0 && pos_agent_[r - 1] == agent);
    }
  }
  for (std::size_t l = 0; l < model_.dec_blocks_.size(); ++l) {
    const auto& b = model_.dec_blocks_[l];
    const Eigen::RowVectorXd xn = layer_norm_row(x, val(b.ln_self_g), val(b.ln_self_b));
    const Eigen::RowVectorXd q = xn * val(b.self_attn.wq);
    x += attend_row(q, k_[l], v_[l], rows, cfg.n_heads, &val(b.same_agent), &own) * val(b.self_attn.wo) +
         val(b.self_attn.bo).row(0);
    x = run_layer_tail(l, std::move(x));
  }
  const Eigen::RowVectorXd out = layer_norm_row(x, val(model_.out_ln_g_), val(model_.out_ln_b_));
  return val(model_.token_table_).topRows(cfg.vocab_size) * out.transpose();
}

void IncrementalDecoder::append(int agent, int t, int token) {
  const auto& cfg = model_.cfg_;
  if (token >= cfg.vocab_size) throw ConfigError("token id outside the vocabulary");
  Eigen::RowVectorXd x = base_row(agent, t);
  if (token >= 0) x += model_.params_[static_cast<std::size_t>(model_.token_table_)].value.row(token);
  append_content(std::move(x), agent, t);
}

}  // namespace trajeglish
