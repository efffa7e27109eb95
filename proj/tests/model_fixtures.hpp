#pragma once

#include "trajeglish/model.hpp"
#include "trajeglish/random.hpp"

namespace trajeglish::testing {

inline SceneInit random_scene(Rng& rng, int n_agents, int n_map) {
  SceneInit init;
  for (int i = 0; i < n_agents; ++i) {
    const auto cls = static_cast<AgentClass>(rng.index(kNumAgentClasses));
    init.agents.push_back({AgentMeta(rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.5), cls),
                           AgentState::make(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-3, 3))});
  }
  for (int k = 0; k < n_map; ++k) {
    MapObject m{static_cast<MapObjectType>(rng.index(kNumMapObjectTypes)), {}};
    const std::size_t pts = 1 + rng.index(6);
    for (std::size_t p = 0; p < pts; ++p) m.points.push_back({rng.uniform(-40, 40), rng.uniform(-40, 40)});
    init.map.push_back(std::move(m));
  }
  return init;
}

inline TokenGrid random_tokens(Rng& rng, int n, int t, int vocab, double invalid_rate = 0.1) {
  TokenGrid g(n, t);
  for (int& id : g.ids) id = rng.bernoulli(invalid_rate) ? kInvalidToken : static_cast<int>(rng.index(vocab));
  return g;
}

inline ModelConfig micro_config(MaskingRegime regime) {
  ModelConfig c;
  c.vocab_size = 12;
  c.hidden_dim = 8;
  c.n_map_layers = 1;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.n_heads = 1;
  c.max_agents = 4;
  c.max_timesteps = 8;
  c.max_map_objects = 8;
  c.max_map_segments = 4;
  c.n_latent_queries = 2;
  c.mlp_ratio = 2;
  c.regime = regime;
  return c;
}

// Spreads weights beyond the tiny init scale so every path carries signal.
inline void scramble(nn::ParamStore& store, Rng& rng, double scale = 0.5) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& v = store[i].value;
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += scale * rng.normal();
  }
}

}  // namespace trajeglish::testing
