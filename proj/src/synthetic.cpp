#include "trajeglish/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "trajeglish/error.hpp"
#include "trajeglish/parallel.hpp"
#include "trajeglish/random.hpp"

namespace trajeglish {

KinematicBounds kinematic_bounds(AgentClass cls) {
  switch (cls) {
    case AgentClass::kVehicle: return {25.0, 1.2};
    case AgentClass::kPedestrian: return {3.0, 2.5};
    case AgentClass::kCyclist: return {10.0, 1.5};
  }
  return {25.0, 1.2};
}

namespace {

constexpr double kPi = std::numbers::pi;

struct Pose {
  double x, y, h;
};

// Piecewise path of straight and constant-curvature segments.
class Path {
 public:
  explicit Path(Pose start) : start_(start) {}

  Path& straight(double length) {
    segs_.push_back({length, 0.0});
    return *this;
  }
  Path& arc(double length, double curvature) {
    segs_.push_back({length, curvature});
    return *this;
  }

  double length() const {
    double l = 0.0;
    for (const auto& s : segs_) l += s.length;
    return l;
  }

  Pose at(double s) const {
    Pose p = start_;
    if (s <= 0.0) return advance(p, s, 0.0);
    for (const auto& seg : segs_) {
      const double step = std::min(s, seg.length);
      p = advance(p, step, seg.curvature);
      s -= step;
      if (s <= 0.0) return p;
    }
    return advance(p, s, 0.0);
  }

  std::vector<Vec2> polyline(double spacing) const {
    std::vector<Vec2> pts;
    const double total = length();
    const int n = std::max(1, static_cast<int>(std::ceil(total / spacing)));
    for (int i = 0; i <= n; ++i) {
      const Pose p = at(total * i / n);
      pts.push_back({p.x, p.y});
    }
    return pts;
  }

  std::vector<Vec2> offset_polyline(double lateral, double spacing) const {
    std::vector<Vec2> pts = polyline(spacing);
    const double total = length();
    const int n = static_cast<int>(pts.size()) - 1;
    for (int i = 0; i <= n; ++i) {
      const Pose p = at(total * i / std::max(n, 1));
      pts[i] = {p.x - std::sin(p.h) * lateral, p.y + std::cos(p.h) * lateral};
    }
    return pts;
  }

 private:
  struct Seg {
    double length;
    double curvature;
  };

  static Pose advance(Pose p, double ds, double k) {
    if (std::abs(k) < 1e-12) return {p.x + ds * std::cos(p.h), p.y + ds * std::sin(p.h), p.h};
    const double h1 = p.h + k * ds;
    return {p.x + (std::sin(h1) - std::sin(p.h)) / k, p.y - (std::cos(h1) - std::cos(p.h)) / k, h1};
  }

  Pose start_;
  std::vector<Seg> segs_;
};

struct Group {
  std::vector<ScenarioAgent> agents;
  std::vector<MapObject> map;
  double radius = 30.0;  // rough extent, used for placement
};

struct Ctx {
  const SynthConfig& cfg;
  Rng& rng;
  std::size_t steps() const { return cfg.horizon + 1; }
};

AgentMeta vehicle_meta(Rng& rng) {
  return AgentMeta(rng.uniform(4.2, 5.0), rng.uniform(1.8, 2.1), AgentClass::kVehicle);
}

// Converts longitudinal/lateral samples along a path into poses. `s` and `l`
// hold steps + 2 samples covering t = -1 .. steps so headings can use central
// differences.
std::vector<AgentState> poses_along(const Path& path, const std::vector<double>& s,
                                    const std::vector<double>& l) {
  std::vector<AgentState> out;
  const std::size_t n = s.size() - 2;
  out.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t k = t + 1;
    const Pose base = path.at(s[k]);
    const double ds = s[k + 1] - s[k - 1];
    const double dl = l[k + 1] - l[k - 1];
    const double slip = (std::abs(ds) < 1e-9 && std::abs(dl) < 1e-9) ? 0.0 : std::atan2(dl, ds);
    out.push_back(AgentState::make(base.x - std::sin(base.h) * l[k],
                                   base.y + std::cos(base.h) * l[k], base.h + slip));
  }
  return out;
}

// Adds heading jitter, then clamps per-tick heading change to the class bound.
void finish_track(Ctx& ctx, ScenarioAgent& agent) {
  auto& st = agent.states;
  const double max_dh = kinematic_bounds(agent.meta.cls()).max_yaw_rate * ctx.cfg.tick;
  const double scale = agent.meta.cls() == AgentClass::kPedestrian ? ctx.cfg.noise.pedestrian_heading
                                                                    : ctx.cfg.noise.heading;
  if (scale > 0.0) {
    double jitter = 0.0;
    for (auto& s : st) {
      jitter = 0.7 * jitter + ctx.rng.normal(0.0, scale);
      s.h = wrap_angle(s.h + jitter);
    }
  }
  if (ctx.cfg.noise.position > 0.0) {
    for (auto& s : st) {
      s.x += ctx.rng.normal(0.0, ctx.cfg.noise.position);
      s.y += ctx.rng.normal(0.0, ctx.cfg.noise.position);
    }
  }
  for (std::size_t t = 1; t < st.size(); ++t) {
    const double dh = wrap_angle(st[t].h - st[t - 1].h);
    st[t].h = wrap_angle(st[t - 1].h + std::clamp(dh, -max_dh, max_dh));
  }
}

std::vector<double> noisy_speed_profile(Ctx& ctx, double v0, std::size_t n) {
  std::vector<double> v(n, v0);
  double cur = v0;
  for (std::size_t t = 0; t < n; ++t) {
    v[t] = cur;
    if (ctx.cfg.noise.speed > 0.0) {
      cur = std::clamp(cur + ctx.rng.normal(0.0, ctx.cfg.noise.speed), 0.8 * v0, 1.2 * v0);
    }
  }
  return v;
}

std::vector<double> integrate(const std::vector<double>& v, double s0, double dt) {
  // v[k] is the speed over [k, k+1); positions start one tick before t=0.
  std::vector<double> s(v.size() + 1);
  s[0] = s0 - v[0] * dt;
  for (std::size_t k = 0; k < v.size(); ++k) s[k + 1] = s[k] + v[k] * dt;
  return s;
}

std::vector<double> lateral_walk(Ctx& ctx, std::size_t n) {
  std::vector<double> l(n, 0.0);
  if (ctx.cfg.noise.lateral <= 0.0) return l;
  double cur = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    cur = 0.95 * cur + ctx.rng.normal(0.0, ctx.cfg.noise.lateral);
    l[t] = cur;
  }
  return l;
}

void add_road(Group& g, const Path& path, int lanes, double lane_width) {
  for (int k = 0; k < lanes; ++k) {
    const double off = (k - 0.5 * (lanes - 1)) * lane_width;
    g.map.push_back({MapObjectType::kLane, path.offset_polyline(off, 2.0)});
  }
  const double edge = 0.5 * lanes * lane_width;
  g.map.push_back({MapObjectType::kRoadEdge, path.offset_polyline(edge, 4.0)});
  g.map.push_back({MapObjectType::kRoadEdge, path.offset_polyline(-edge, 4.0)});
}

Group lane_follow(Ctx& ctx, std::size_t budget) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t n = ctx.steps() + 1;  // speed samples for t = -1 .. steps - 1
  Path path({0.0, 0.0, 0.0});
  if (ctx.rng.bernoulli(0.5)) {
    path.straight(160.0);
  } else {
    const double radius = ctx.rng.uniform(80.0, 200.0) * (ctx.rng.bernoulli(0.5) ? 1.0 : -1.0);
    path.straight(40.0).arc(120.0, 1.0 / radius);
  }
  add_road(g, path, 1, 3.6);
  const std::size_t count = std::min<std::size_t>(budget, ctx.rng.bernoulli(0.5) ? 2 : 1);
  const double v_lead = ctx.rng.uniform(3.0, 20.0);
  double s_front = ctx.rng.uniform(35.0, 50.0);
  for (std::size_t i = 0; i < count; ++i) {
    const double v0 = i == 0 ? v_lead : v_lead * ctx.rng.uniform(0.85, 0.95);
    const double s0 = s_front - i * ctx.rng.uniform(25.0, 35.0);
    auto v = noisy_speed_profile(ctx, v0, n);
    auto s = integrate(v, s0, dt);
    auto l = lateral_walk(ctx, s.size());
    ScenarioAgent a{0, vehicle_meta(ctx.rng), poses_along(path, s, l), false};
    finish_track(ctx, a);
    g.agents.push_back(std::move(a));
  }
  g.radius = 60.0;
  return g;
}

Group turn(Ctx& ctx) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t n = ctx.steps() + 1;
  const double radius = ctx.rng.uniform(10.0, 25.0);
  const double sign = ctx.rng.bernoulli(0.5) ? 1.0 : -1.0;
  const double angle = ctx.rng.uniform(kPi / 3.0, kPi / 2.0);
  const double lead_in = ctx.rng.uniform(10.0, 25.0);
  Path path({0.0, 0.0, 0.0});
  path.straight(lead_in).arc(radius * angle, sign / radius).straight(60.0);
  add_road(g, path, 1, 3.6);
  const bool cyclist = ctx.rng.bernoulli(0.3);
  const AgentMeta meta = cyclist ? AgentMeta(ctx.rng.uniform(1.6, 1.9), ctx.rng.uniform(0.6, 0.8),
                                             AgentClass::kCyclist)
                                 : vehicle_meta(ctx.rng);
  const double v_cap = std::min(cyclist ? 6.0 : 10.0, std::sqrt(2.5 * radius));
  const double v0 = ctx.rng.uniform(0.5 * v_cap, v_cap);
  auto v = noisy_speed_profile(ctx, v0, n);
  auto s = integrate(v, ctx.rng.uniform(0.0, lead_in), dt);
  auto l = lateral_walk(ctx, s.size());
  ScenarioAgent a{0, meta, poses_along(path, s, l), false};
  finish_track(ctx, a);
  g.agents.push_back(std::move(a));
  g.radius = 50.0;
  return g;
}

// Leader with random braking; followers track the leader's state from
// `delay` ticks ago with an intelligent-driver-style law. Every vehicle starts
// at the cruise speed and each follower keeps its own time headway, so a
// single frame reveals neither the speed nor, through the gaps, a hint of it.
Group stop_and_go(Ctx& ctx, std::size_t budget) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t steps = ctx.steps();
  Path path({0.0, 0.0, 0.0});
  path.straight(200.0);
  add_road(g, path, 1, 3.6);
  const std::size_t count = std::min<std::size_t>(budget, 2 + ctx.rng.index(3));
  const double v_cruise = ctx.rng.uniform(3.0, 20.0);
  constexpr std::size_t kDelay = 2;
  constexpr double kMinGap = 2.0, kAccel = 2.0, kComfortDecel = 3.0;

  std::vector<AgentMeta> metas;
  std::vector<double> headway;
  for (std::size_t i = 0; i < count; ++i) {
    metas.push_back(vehicle_meta(ctx.rng));
    headway.push_back(ctx.rng.uniform(0.6, 1.4));
  }

  // Simulate t = -1 .. steps on the longitudinal axis (front bumper positions irrelevant;
  // gaps use centers minus half lengths).
  const std::size_t n = steps + 2;
  std::vector<std::vector<double>> s(count, std::vector<double>(n)), v(count, std::vector<double>(n));
  double lead_s = ctx.rng.uniform(60.0, 80.0);
  double lead_v = v_cruise;
  int brake_left = 0;
  double brake_decel = 0.0;
  // Warm start: followers at equilibrium gap behind their predecessor.
  for (std::size_t i = 0; i < count; ++i) {
    v[i][0] = v_cruise;
    if (i == 0) {
      s[i][0] = lead_s;
    } else {
      const double gap = kMinGap + v_cruise * headway[i] + ctx.rng.uniform(0.0, 1.0);
      s[i][0] = s[i - 1][0] - gap - 0.5 * (metas[i].length() + metas[i - 1].length());
    }
  }
  for (std::size_t k = 1; k < n; ++k) {
    // Leader.
    if (brake_left == 0 && ctx.rng.bernoulli(0.05)) {
      brake_left = static_cast<int>(ctx.rng.uniform(5.0, 15.0));
      brake_decel = ctx.rng.uniform(3.0, 6.0);
    }
    double a_lead;
    if (brake_left > 0) {
      a_lead = -brake_decel;
      --brake_left;
    } else {
      a_lead = std::clamp((v_cruise - lead_v) / 1.0, -1.5, 1.5);
    }
    const double v_next = std::max(0.0, lead_v + a_lead * dt);
    lead_s += 0.5 * (lead_v + v_next) * dt;
    lead_v = v_next;
    s[0][k] = lead_s;
    v[0][k] = lead_v;
    // Followers react to the predecessor's state kDelay ticks ago.
    for (std::size_t i = 1; i < count; ++i) {
      const std::size_t seen = k >= kDelay + 1 ? k - 1 - kDelay : 0;
      const double lead_pos = s[i - 1][seen] + (k - 1 - seen) * dt * v[i - 1][seen];
      const double gap = lead_pos - s[i][k - 1] - 0.5 * (metas[i].length() + metas[i - 1].length());
      const double dv = v[i][k - 1] - v[i - 1][seen];
      const double desired = kMinGap + v[i][k - 1] * headway[i] +
                             v[i][k - 1] * dv / (2.0 * std::sqrt(kAccel * kComfortDecel));
      double a = kAccel * (1.0 - std::pow(v[i][k - 1] / (v_cruise + 1.0), 4.0) -
                           std::pow(std::max(desired, 0.0) / std::max(gap, 0.1), 2.0));
      a = std::clamp(a, -8.0, kAccel);
      const double vf = std::max(0.0, v[i][k - 1] + a * dt);
      s[i][k] = s[i][k - 1] + 0.5 * (v[i][k - 1] + vf) * dt;
      v[i][k] = vf;
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto li = lateral_walk(ctx, s[i].size());
    ScenarioAgent a{0, metas[i], poses_along(path, s[i], li), false};
    finish_track(ctx, a);
    g.agents.push_back(std::move(a));
  }
  g.radius = 70.0;
  return g;
}

// Pedestrians walking in formation; the whole group turns on the same tick.
Group pedestrian_cluster(Ctx& ctx, std::size_t budget) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t steps = ctx.steps();
  const std::size_t count = std::min<std::size_t>(budget, 2 + ctx.rng.index(3));
  std::vector<Vec2> offsets;
  const double spacing = ctx.rng.uniform(1.2, 1.5);
  for (std::size_t i = 0; i < count; ++i) {
    const double row = (i / 2) * -1.2;
    const double col = (i % 2 == 0 ? -0.5 : 0.5) * spacing;
    offsets.push_back({row, count == 1 ? 0.0 : col});
  }
  Path walk({-10.0, 0.0, 0.0});
  walk.straight(40.0);
  g.map.push_back({MapObjectType::kSidewalk, walk.offset_polyline(2.0, 4.0)});
  g.map.push_back({MapObjectType::kSidewalk, walk.offset_polyline(-2.0, 4.0)});
  Path cross({5.0, -8.0, kPi / 2.0});
  cross.straight(16.0);
  g.map.push_back({MapObjectType::kCrosswalk, cross.polyline(4.0)});

  std::vector<AgentMeta> metas;
  for (std::size_t i = 0; i < count; ++i) {
    metas.push_back(AgentMeta(ctx.rng.uniform(0.5, 0.7), ctx.rng.uniform(0.5, 0.7),
                              AgentClass::kPedestrian));
  }
  const double speed = ctx.rng.uniform(1.0, 1.6);
  double cx = 0.0, cy = 0.0, heading = ctx.rng.uniform(-0.3, 0.3);
  double turn_rate = 0.0;
  int turn_left = 0;
  std::vector<ScenarioAgent> agents;
  for (std::size_t i = 0; i < count; ++i) agents.push_back({0, metas[i], {}, false});
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t i = 0; i < count; ++i) {
      const double c = std::cos(heading), s = std::sin(heading);
      const double jx = ctx.cfg.noise.lateral > 0.0 ? ctx.rng.normal(0.0, ctx.cfg.noise.lateral) : 0.0;
      const double jy = ctx.cfg.noise.lateral > 0.0 ? ctx.rng.normal(0.0, ctx.cfg.noise.lateral) : 0.0;
      agents[i].states.push_back(AgentState::make(cx + c * offsets[i].x - s * offsets[i].y + jx,
                                                  cy + s * offsets[i].x + c * offsets[i].y + jy,
                                                  heading));
    }
    if (turn_left == 0 && ctx.rng.bernoulli(0.06)) {
      turn_left = 10;
      turn_rate = (ctx.rng.bernoulli(0.5) ? 1.0 : -1.0) * ctx.rng.uniform(0.3, 0.8) / (10 * dt);
    }
    double h_next = heading;
    if (turn_left > 0) {
      h_next += turn_rate * dt;
      --turn_left;
    }
    const double hm = 0.5 * (heading + h_next);
    cx += speed * dt * std::cos(hm);
    cy += speed * dt * std::sin(hm);
    heading = h_next;
  }
  for (auto& a : agents) {
    finish_track(ctx, a);
    g.agents.push_back(std::move(a));
  }
  g.radius = 25.0;
  return g;
}

// Two vehicles side by side; at t = 0 the pair picks one direction and both
// shift one lane that way. The shift starts with its peak lateral speed, so
// the first token already commits to a side while the initial pose is straight.
Group paired_lane_change(Ctx& ctx) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t n = ctx.steps() + 1;
  constexpr double kLaneWidth = 3.5;
  Path path({0.0, 0.0, 0.0});
  path.straight(200.0);
  add_road(g, path, 4, kLaneWidth);
  const double direction = ctx.rng.bernoulli(0.5) ? 1.0 : -1.0;
  const double duration = ctx.rng.uniform(2.5, 3.5);
  const double v_base = ctx.rng.uniform(8.0, 12.0);
  const double s_base = ctx.rng.uniform(60.0, 80.0);
  for (int side = 0; side < 2; ++side) {
    const double lane = side == 0 ? -0.5 * kLaneWidth : 0.5 * kLaneWidth;
    const double v0 = v_base + ctx.rng.uniform(-0.3, 0.3);
    auto v = noisy_speed_profile(ctx, v0, n);
    auto s = integrate(v, s_base + ctx.rng.uniform(-1.5, 1.5), dt);
    std::vector<double> l(s.size());
    const auto noise = lateral_walk(ctx, s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double t = std::clamp((static_cast<double>(k) - 2.0) * dt, 0.0, duration);
      l[k] = lane + direction * kLaneWidth * std::sin(0.5 * kPi * t / duration) + noise[k];
    }
    ScenarioAgent a{0, vehicle_meta(ctx.rng), poses_along(path, s, l), false};
    finish_track(ctx, a);
    g.agents.push_back(std::move(a));
  }
  g.radius = 60.0;
  return g;
}

// Loose group of near-stationary agents: parked vehicles with small pose noise
// and pedestrians that shuffle and turn in place.
Group idle(Ctx& ctx, std::size_t budget) {
  Group g;
  const double dt = ctx.cfg.tick;
  const std::size_t steps = ctx.steps();
  const std::size_t count = std::min<std::size_t>(budget, 1 + ctx.rng.index(4));
  Path curb({-20.0, -4.0, 0.0});
  curb.straight(40.0);
  g.map.push_back({MapObjectType::kSidewalk, curb.polyline(4.0)});
  for (std::size_t i = 0; i < count; ++i) {
    const bool walker = ctx.rng.bernoulli(0.6);
    ScenarioAgent a{0,
                    walker ? AgentMeta(ctx.rng.uniform(0.5, 0.7), ctx.rng.uniform(0.5, 0.7), AgentClass::kPedestrian)
                           : vehicle_meta(ctx.rng),
                    {},
                    false};
    double x = ctx.rng.uniform(-15.0, 15.0), y = ctx.rng.uniform(-6.0, 6.0), h = ctx.rng.uniform(-kPi, kPi);
    const double max_rate = kinematic_bounds(a.meta.cls()).max_yaw_rate;
    double rate = 0.0, speed = 0.0, drift = 0.0;
    int left = 0;
    for (std::size_t k = 0; k < steps; ++k) {
      a.states.push_back(AgentState::make(x, y, h));
      if (!walker) {
        const double jx = ctx.cfg.noise.lateral > 0.0 ? ctx.rng.normal(0.0, 0.5 * ctx.cfg.noise.lateral) : 0.0;
        const double jy = ctx.cfg.noise.lateral > 0.0 ? ctx.rng.normal(0.0, 0.5 * ctx.cfg.noise.lateral) : 0.0;
        x += jx;
        y += jy;
        continue;
      }
      if (left == 0 && ctx.rng.bernoulli(0.12)) {
        left = 3 + static_cast<int>(ctx.rng.index(8));
        rate = ctx.rng.uniform(-0.9, 0.9) * max_rate;
        speed = ctx.rng.bernoulli(0.5) ? ctx.rng.uniform(0.0, 0.6) : 0.0;
        drift = ctx.rng.uniform(-kPi, kPi);
      }
      if (left > 0) {
        h = wrap_angle(h + rate * dt);
        x += speed * dt * std::cos(h + drift);
        y += speed * dt * std::sin(h + drift);
        --left;
      }
    }
    finish_track(ctx, a);
    g.agents.push_back(std::move(a));
  }
  g.radius = 25.0;
  return g;
}

void transform_group(Group& g, const Pose& frame) {
  const AgentState f = AgentState::make(frame.x, frame.y, frame.h);
  for (auto& a : g.agents) {
    for (auto& s : a.states) s = to_global(f, s);
  }
  const double c = std::cos(frame.h), sn = std::sin(frame.h);
  for (auto& m : g.map) {
    for (auto& p : m.points) p = {frame.x + c * p.x - sn * p.y, frame.y + sn * p.x + c * p.y};
  }
}

}  // namespace

Scenario generate_scenario(const SynthConfig& cfg, std::size_t index) {
  Rng rng(mix_seed(cfg.seed, index));
  Ctx ctx{cfg, rng};
  Scenario sc;
  sc.id = "synth-" + std::to_string(cfg.seed) + "-" + std::to_string(index);
  sc.tick = cfg.tick;

  const std::array<double, 6> weights = {cfg.mix.lane_follow,        cfg.mix.turn,
                                         cfg.mix.stop_and_go,        cfg.mix.pedestrian_cluster,
                                         cfg.mix.paired_lane_change, cfg.mix.idle};
  std::vector<Group> groups;
  std::size_t used = 0;
  while (used < cfg.agents_per_scene) {
    const std::size_t budget = cfg.agents_per_scene - used;
    std::array<double, 6> w = weights;
    if (budget < 2) w[2] = w[4] = 0.0;  // coupled behaviors need two agents
    double total = 0.0;
    for (double x : w) total += x;
    if (total <= 0.0) break;
    Group g;
    switch (rng.categorical(w)) {
      case 0: g = lane_follow(ctx, budget); break;
      case 1: g = turn(ctx); break;
      case 2: g = stop_and_go(ctx, budget); break;
      case 3: g = pedestrian_cluster(ctx, budget); break;
      case 4: g = paired_lane_change(ctx); break;
      default: g = idle(ctx, budget); break;
    }
    used += g.agents.size();
    groups.push_back(std::move(g));
    if (!groups.empty() && rng.bernoulli(0.15)) break;
  }

  // Lay groups out on a coarse grid so they do not interact.
  const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(groups.size()))));
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const Pose frame{static_cast<double>(k % cols) * 220.0 + rng.uniform(-10.0, 10.0),
                     static_cast<double>(k / cols) * 220.0 + rng.uniform(-10.0, 10.0),
                     rng.uniform(-kPi, kPi)};
    transform_group(groups[k], frame);
  }
  const Pose scene{rng.uniform(-500.0, 500.0), rng.uniform(-500.0, 500.0), rng.uniform(-kPi, kPi)};
  for (auto& g : groups) {
    transform_group(g, scene);
    for (auto& a : g.agents) sc.agents.push_back(std::move(a));
    for (auto& m : g.map) sc.map.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    auto& a = sc.agents[i];
    a.id = static_cast<std::int64_t>(i);
    if (cfg.missing_rate > 0.0 && rng.bernoulli(cfg.missing_rate) && a.states.size() > 4) {
      const std::size_t cut = 2 + rng.index(a.states.size() - 2);
      for (std::size_t t = cut; t < a.states.size(); ++t) a.states[t] = AgentState::invalid();
    }
  }
  std::size_t sdc = 0;
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    if (sc.agents[i].meta.cls() == AgentClass::kVehicle) {
      sdc = i;
      break;
    }
  }
  if (!sc.agents.empty()) sc.agents[sdc].sdc = true;
  sc.validate();
  return sc;
}

Corpus generate_synthetic(const SynthConfig& cfg) {
  Corpus corpus(cfg.n_scenarios);
  parallel_for(cfg.n_scenarios, cfg.workers,
               [&](std::size_t i) { corpus[i] = generate_scenario(cfg, i); });
  return corpus;
}

Corpus generate_constant_velocity(const ConstantVelocityConfig& cfg) {
  if (cfg.n_speeds < 1 || cfg.agents_per_scene < 1) throw ConfigError("constant-velocity corpus needs speeds and agents");
  Corpus corpus;
  for (std::size_t s = 0; s < cfg.n_scenarios; ++s) {
    Rng rng(mix_seed(cfg.seed, s));
    Scenario sc;
    sc.id = "constvel-" + std::to_string(cfg.seed) + "-" + std::to_string(s);
    sc.tick = cfg.tick;
    for (std::size_t i = 0; i < cfg.agents_per_scene; ++i) {
      const std::size_t k = rng.index(cfg.n_speeds);
      const double v = static_cast<double>(k) * cfg.speed_step;
      const double x0 = rng.uniform(-40.0, 40.0), y0 = rng.uniform(-40.0, 40.0), h = rng.uniform(-kPi, kPi);
      ScenarioAgent a{static_cast<std::int64_t>(i), AgentMeta(3.0 + 0.5 * static_cast<double>(k), 1.8), {}, i == 0};
      for (std::size_t t = 0; t <= cfg.horizon; ++t) {
        const double d = v * cfg.tick * static_cast<double>(t);
        a.states.push_back(AgentState::make(x0 + d * std::cos(h), y0 + d * std::sin(h), h));
      }
      sc.agents.push_back(std::move(a));
    }
    sc.map.push_back({MapObjectType::kLane, {{-50.0, 0.0}, {0.0, 0.0}, {50.0, 0.0}}});
    corpus.push_back(std::move(sc));
  }
  return corpus;
}

TemplateSet constant_velocity_templates(const ConstantVelocityConfig& cfg, std::size_t vocab_size) {
  if (vocab_size < cfg.n_speeds) throw ConfigError("vocabulary smaller than the number of speed classes");
  std::vector<Template> t;
  for (std::size_t k = 0; k < cfg.n_speeds; ++k) t.push_back({static_cast<double>(k) * cfg.speed_step * cfg.tick, 0.0, 0.0});
  const std::size_t exact = t.size();
  const AgentMeta unit = AgentMeta::unit_box();
  Rng rng(mix_seed(cfg.seed, 0xc0de));
  while (t.size() < vocab_size) {
    const Template c{rng.uniform(-1.0, 3.0), rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4)};
    bool far = true;
    for (std::size_t k = 0; k < exact && far; ++k) {
      far = corner_distance(t[k].as_state(), c.as_state(), unit) > 0.1;
    }
    if (far) t.push_back(c);
  }
  return TemplateSet(std::move(t), VocabMethod::kKDisks, 0.0, cfg.seed);
}

}  // namespace trajeglish
