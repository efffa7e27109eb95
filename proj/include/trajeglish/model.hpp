#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "trajeglish/nn/graph.hpp"
#include "trajeglish/scenario.hpp"
#include "trajeglish/tokenizer.hpp"

namespace trajeglish {

enum class MaskingRegime : std::uint8_t { kFullIntra, kNoIntra, kMarginal, kMarginalNoMap };

std::string_view to_string(MaskingRegime r);
MaskingRegime masking_regime_from_string(std::string_view s);

struct ModelConfig {
  int vocab_size = 384;
  int hidden_dim = 64;
  int n_map_layers = 2;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int n_heads = 4;
  int max_agents = 8;
  int max_timesteps = 32;
  int max_map_objects = 64;
  int max_map_segments = 16;  // per polyline; longer polylines are resampled
  int n_latent_queries = 8;
  int mlp_ratio = 4;
  double position_scale = 50.0;  // meters per unit of encoder input
  MaskingRegime regime = MaskingRegime::kFullIntra;
  double dropout = 0.0;

  // Throws ConfigError on invalid combinations.
  void validate() const;
  // Agent-order embeddings are used only where intra-timestep order matters.
  bool uses_order() const { return regime == MaskingRegime::kFullIntra || regime == MaskingRegime::kNoIntra; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct SceneAgent {
  AgentMeta meta;
  AgentState init;  // must be valid
};

/// Conditioning context. Agents are listed in intra-timestep action order;
/// all poses are in the scene frame.
struct SceneInit {
  std::vector<SceneAgent> agents;
  std::vector<MapObject> map;
};

// The `limit` map objects closest to the origin, in their original order.
std::vector<MapObject> nearest_map_objects(const std::vector<MapObject>& map, std::size_t limit);

// Builds a SceneInit from one timestep of a scenario: agents in `order`, poses
// expressed in `frame`. Agents must be valid at t0.
SceneInit make_scene_init(const Scenario& sc, std::size_t t0, const std::vector<std::size_t>& order,
                          const AgentState& frame);

/// N x T token ids; kInvalidToken marks missing steps.
struct TokenGrid {
  int n_agents = 0;
  int n_steps = 0;
  std::vector<int> ids;  // agent-major: ids[i * n_steps + t]

  TokenGrid() = default;
  TokenGrid(int n, int t) : n_agents(n), n_steps(t), ids(static_cast<std::size_t>(n) * t, kInvalidToken) {}
  int& at(int agent, int t) { return ids[static_cast<std::size_t>(agent) * n_steps + t]; }
  int at(int agent, int t) const { return ids[static_cast<std::size_t>(agent) * n_steps + t]; }
  bool valid(int agent, int t) const { return at(agent, t) >= 0; }
  // Flattened timestep-major order: (t=0, agents 0..N-1), (t=1, ...), ...
  std::vector<int> flatten() const;
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Decoder visibility over the flattened sequence, S = N * T. Entry (p, q) is
// true when the prediction at p may condition on the token at q.
nn::Mask build_mask(MaskingRegime regime, int n_agents, int n_steps);
bool visible(MaskingRegime regime, int n_agents, int p, int q);

/// Encoder-decoder over token grids with tied token embedding and output weights.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, nn::ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  int token_table_index() const { return token_table_; }

  // Scene embedding sequence: n_latent_queries + N rows of width C.
  nn::Graph::Id encode(nn::Graph& g, const SceneInit& init, Rng* dropout_rng = nullptr) const;
  // Logits (N*T) x |V| in flattened order for every position of `inputs`.
  nn::Graph::Id forward(nn::Graph& g, const TokenGrid& inputs, const SceneInit& init,
                        Rng* dropout_rng = nullptr) const;

  // Gradient-free conveniences.
  nn::Mat encode_scene(const SceneInit& init) const;
  nn::Mat logits(const TokenGrid& inputs, const SceneInit& init) const;

  // Validates shapes against the config; throws ConfigError.
  void check_inputs(const TokenGrid& inputs, const SceneInit& init) const;

 private:
  struct AttnIds {
    int wq, wk, wv, wo, bo;
  };
  struct BlockIds {
    int ln1_g, ln1_b, ln2_g, ln2_b;
    AttnIds attn;
    int w1, b1, w2, b2;
  };
  struct DecIds {
    int ln_self_g, ln_self_b, ln_cross_g, ln_cross_b, ln_mlp_g, ln_mlp_b;
    AttnIds self_attn, cross_attn;
    int w1, b1, w2, b2;
    int same_agent;  // 1 x heads score bias for keys of the query's own agent
  };

  void build(std::uint64_t seed);
  void bind();
  AttnIds attn_ids(const std::string& prefix) const;
  BlockIds block_ids(const std::string& prefix) const;

  nn::Graph::Id self_block(nn::Graph& g, const BlockIds& b, nn::Graph::Id x, Rng* rng) const;
  nn::Graph::Id mlp(nn::Graph& g, int w1, int b1, int w2, int b2, nn::Graph::Id x, Rng* rng) const;
  nn::Graph::Id attend(nn::Graph& g, const AttnIds& a, nn::Graph::Id q_in, nn::Graph::Id kv_in,
                       const nn::Mask* mask, Rng* rng, int bias = -1, const nn::Mask* bias_where = nullptr) const;

  friend class IncrementalDecoder;

  ModelConfig cfg_;
  nn::ParamStore params_;

  int agent_in_w_ = -1, agent_in_b_ = -1, enc_order_ = -1;
  int seg1_w_ = -1, seg1_b_ = -1, seg2_w_ = -1, seg2_b_ = -1, map_type_ = -1;
  std::vector<BlockIds> map_blocks_, enc_blocks_;
  int latents_ = -1, lat_ln_q_g_ = -1, lat_ln_q_b_ = -1, lat_ln_kv_g_ = -1, lat_ln_kv_b_ = -1;
  int lat_ln_mlp_g_ = -1, lat_ln_mlp_b_ = -1;
  AttnIds lat_attn_{};
  int lat_w1_ = -1, lat_b1_ = -1, lat_w2_ = -1, lat_b2_ = -1;
  int enc_ln_g_ = -1, enc_ln_b_ = -1;
  int token_table_ = -1, time_emb_ = -1, dec_order_ = -1, agent_proj_ = -1, query_emb_ = -1;
  std::vector<DecIds> dec_blocks_;
  int out_ln_g_ = -1, out_ln_b_ = -1;
};

// Mean cross-entropy over valid target positions (flattened order). Throws
// DataError when no target is valid.
double token_loss(const nn::Mat& logits, const TokenGrid& targets);

// log p(target) at every flattened position; NaN where the target is invalid.
std::vector<double> token_log_probs(const nn::Mat& logits, const TokenGrid& targets);

/// Incremental decoding with per-layer key/value caches over the content
/// stream. Positions must be appended in the regime's causal order.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Model& model, const SceneInit& init);

  // Logits for the token of `agent` at decoding step `t`, given every token
  // appended so far that is visible under the model's regime.
  Eigen::VectorXd predict(int agent, int t) const;
  // Appends the token chosen for (agent, t); invalid ids append a zero-embedded row.
  void append(int agent, int t, int token);
  std::size_t cached_positions() const { return pos_agent_.size(); }
  int n_agents() const { return n_agents_; }

 private:
  Eigen::RowVectorXd base_row(int agent, int t) const;
  bool sees(int agent, int t, std::size_t row) const;
  void append_content(Eigen::RowVectorXd x, int agent, int t);
  Eigen::RowVectorXd run_layer_tail(std::size_t layer, Eigen::RowVectorXd x) const;

  const Model& model_;
  int n_agents_;
  nn::Mat agent_vec_;                  // N x C identity vectors from the encoder
  std::vector<nn::Mat> cross_k_, cross_v_;  // per decoder layer, over encoder rows
  std::vector<nn::Mat> k_, v_;              // per decoder layer, content rows (row 0 = start)
  std::vector<int> pos_agent_, pos_t_;      // per content row after the start row
};

}  // namespace trajeglish
