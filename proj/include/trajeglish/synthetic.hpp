#pragma once

#include <cstdint>

#include "trajeglish/scenario.hpp"
#include "trajeglish/tokenizer.hpp"

namespace trajeglish {

/// Relative weights of the scripted behaviors a scene is assembled from.
struct BehaviorMix {
  double lane_follow = 1.0;
  double turn = 1.0;
  double stop_and_go = 1.0;         // leader with random braking, delayed-reaction followers
  double pedestrian_cluster = 1.0;  // groups that change heading together
  double paired_lane_change = 1.0;  // side-by-side pair choosing a shared direction at t=0
  double idle = 1.0;                // parked vehicles, pedestrians standing and turning in place
};

struct NoiseScales {
  double speed = 0.05;     // m/s random-walk increment per tick
  double lateral = 0.005;  // m random-walk increment per tick
  double heading = 0.002;  // rad jitter per tick
  double pedestrian_heading = 0.03;  // rad jitter per tick for pedestrians
  double position = 0.015;           // m white observation noise on x and y
};

struct SynthConfig {
  std::size_t n_scenarios = 200;
  std::size_t agents_per_scene = 6;
  std::size_t horizon = 32;  // ticks; each track has horizon + 1 states
  BehaviorMix mix;
  NoiseScales noise;
  double missing_rate = 0.0;  // per-agent probability of a truncated (invalid) tail
  double tick = kDefaultTick;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct KinematicBounds {
  double max_speed;     // m/s
  double max_yaw_rate;  // rad/s
};

KinematicBounds kinematic_bounds(AgentClass cls);

Corpus generate_synthetic(const SynthConfig& cfg);
Scenario generate_scenario(const SynthConfig& cfg, std::size_t index);

/// Straight constant-speed vehicles whose per-tick displacement is exactly one
/// template. Speed class k has speed k * speed_step and box length
/// 3 + 0.5 k, so every token is determined by the initial scene.
struct ConstantVelocityConfig {
  std::size_t n_scenarios = 128;
  std::size_t agents_per_scene = 4;
  std::size_t horizon = 16;
  std::size_t n_speeds = 6;
  double speed_step = 2.0;  // m/s
  double tick = kDefaultTick;
  std::uint64_t seed = 0;
};

Corpus generate_constant_velocity(const ConstantVelocityConfig& cfg);
// The exact per-tick deltas first, padded with random templates separated
// from them to `vocab_size` entries.
TemplateSet constant_velocity_templates(const ConstantVelocityConfig& cfg, std::size_t vocab_size);

}  // namespace trajeglish
