#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <json.hpp>

#include "trajeglish/metrics.hpp"
#include "trajeglish/model.hpp"
#include "trajeglish/tokenizer.hpp"
#include "trajeglish/windowing.hpp"

namespace trajeglish {

// Nucleus-truncated categorical draw from softmax(logits / temperature).
int sample_token(const Eigen::VectorXd& logits, double temperature, double p_top, Rng& rng);

enum class Controller : std::uint8_t { kModel, kReplay, kExternal };

std::string_view to_string(Controller c);
Controller controller_from_string(std::string_view s);

// Receives the rollout agent index, the scenario step being chosen and the
// rendered history (rollout-agent-major, steps t0..t-1); returns a raw global state.
using ExternalPolicy = std::function<AgentState(std::size_t agent, std::size_t step, const StateGrid& history)>;

/// Per scenario agent controller; external agents must act before model agents.
struct ControlAssignment {
  std::vector<Controller> controllers;
  std::vector<ExternalPolicy> policies;  // used for external agents only

  static ControlAssignment all(std::size_t n, Controller c) { return {std::vector<Controller>(n, c), {}}; }
};

struct WindowConfig {
  std::size_t max_agents = 0;                    // 0 = the model's max_agents
  std::vector<std::size_t> recompute_timesteps;  // rollout steps; step 0 is implicit
};

struct RolloutConfig {
  double temperature = 1.0;
  double p_top = 1.0;
  std::size_t horizon = 16;
  std::size_t n_rollouts = 1;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t context_steps = 16;  // token history kept when a decoder is rebuilt
  WindowConfig window;

  void validate() const;
  nlohmann::json to_json() const;
  static RolloutConfig from_json(const nlohmann::json& j);
};

struct WindowRecord {
  std::size_t step = 0;       // rollout step at which the decoders were rebuilt
  std::size_t init_step = 0;  // step whose states initialize them; tokens in between are replayed
  std::vector<AgentWindow> windows;  // agents are rollout-agent indices
};

/// One sampled future. Rows follow `agents`.
struct Rollout {
  std::size_t t0 = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> agents;  // scenario indices in acting order of the first window
  TokenGrid tokens;                 // agents x horizon; token k moves state k to k + 1
  StateGrid states;                 // agents x (horizon + 1), global frame; column 0 is the initialization
  std::vector<std::vector<double>> log_probs;  // model log-prob of each sampled token; NaN for other controllers
  double total_log_prob = 0.0;
  std::vector<WindowRecord> schedule;

  nlohmann::json to_json(const Scenario& sc, const RolloutConfig& cfg) const;
};

/// Step-by-step closed-loop simulation of one scenario (a single rollout).
class RolloutEngine {
 public:
  // `order` lists scenario agents in acting order; agents invalid at t0 are
  // dropped. Empty order = SDC first, then by distance. Windowing is used when
  // more agents remain than the window size.
  RolloutEngine(const Model& model, const TemplateSet& ts, const Scenario& sc, std::size_t t0,
                ControlAssignment control, std::vector<std::size_t> order, const RolloutConfig& cfg,
                std::uint64_t seed);
  ~RolloutEngine();
  RolloutEngine(const RolloutEngine&) = delete;
  RolloutEngine& operator=(const RolloutEngine&) = delete;

  // Chooses tokens for every agent at the next step and renders their states.
  void step();
  std::size_t steps_taken() const { return k_; }
  // Logits the model assigned to rollout agent `a` at its last model-sampled step.
  const Eigen::VectorXd& last_logits(std::size_t a) const { return last_logits_.at(a); }
  Rollout finish() &&;

 private:
  struct Window;
  void rebuild(std::size_t ctx);
  AgentState choose_token(std::size_t a, std::size_t wi, std::size_t slot, int& token);

  const Model& model_;
  const TemplateSet& ts_;
  const Scenario& sc_;
  ControlAssignment control_;
  RolloutConfig cfg_;
  Rng rng_;
  std::size_t window_size_;
  bool windowed_;
  Rollout out_;
  std::size_t k_ = 0;
  std::size_t base_ = 0;  // rollout step of the current decoders' initialization
  std::vector<std::unique_ptr<Window>> windows_;
  std::vector<Eigen::VectorXd> last_logits_;
};

// n_rollouts independent samples; rollout r uses seed mix_seed(cfg.seed, r).
std::vector<Rollout> rollout(const Model& model, const TemplateSet& ts, const Scenario& sc, std::size_t t0,
                             const ControlAssignment& control, const RolloutConfig& cfg,
                             const std::vector<std::size_t>& order = {});

// Teacher-forced log-probability of a rollout's model-controlled tokens, from
// one batch forward pass over the initialization. Requires a single window
// and horizon <= max_timesteps.
double teacher_forced_log_prob(const Model& model, const Scenario& sc, const Rollout& r);

// Scene initialization used by the engine for a set of agents at t0.
SceneInit rollout_scene_init(const Scenario& sc, const std::vector<AgentState>& states,
                             const std::vector<std::size_t>& scenario_agents, std::size_t frame_slot,
                             std::size_t max_map_objects);

void write_rollouts_jsonl(const std::filesystem::path& path, const Scenario& sc, const std::vector<Rollout>& rs,
                          const RolloutConfig& cfg);

}  // namespace trajeglish
