#include "trajeglish/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "trajeglish/error.hpp"

namespace trajeglish {

double wrap_angle(double h) {
  constexpr double kPi = std::numbers::pi;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  if (h > -kPi && h <= kPi) return h;
  double r = std::fmod(h + kPi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  r -= kPi;
  // fmod maps an odd multiple of pi to -pi; the interval is open there.
  return r <= -kPi ? kPi : r;
}

std::string_view to_string(AgentClass c) {
  switch (c) {
    case AgentClass::kVehicle: return "vehicle";
    case AgentClass::kPedestrian: return "pedestrian";
    case AgentClass::kCyclist: return "cyclist";
  }
  return "vehicle";
}

AgentClass agent_class_from_string(std::string_view s) {
  if (s == "vehicle") return AgentClass::kVehicle;
  if (s == "pedestrian") return AgentClass::kPedestrian;
  if (s == "cyclist") return AgentClass::kCyclist;
  throw DataError("unknown agent class '" + std::string(s) + "'");
}

AgentMeta::AgentMeta(double length, double width, AgentClass cls)
    : length_(length), width_(width), cls_(cls) {
  if (!(length > 0.0) || !(width > 0.0) || !std::isfinite(length) || !std::isfinite(width)) {
    throw std::invalid_argument("AgentMeta: length and width must be finite and > 0");
  }
}

namespace {

void require_valid(const AgentState& s, const char* what) {
  if (!s.valid) throw std::invalid_argument(std::string(what) + ": invalid agent state");
}

}  // namespace

BoxCorners corners(const AgentState& s, const AgentMeta& m) {
  require_valid(s, "corners");
  const double c = std::cos(s.h), sn = std::sin(s.h);
  const double hl = 0.5 * m.length(), hw = 0.5 * m.width();
  auto place = [&](double u, double v) {
    return Vec2{s.x + c * u - sn * v, s.y + sn * u + c * v};
  };
  return {place(hl, hw), place(hl, -hw), place(-hl, -hw), place(-hl, hw)};
}

double corner_distance(const AgentState& a, const AgentState& b, const AgentMeta& m) {
  require_valid(a, "corner_distance");
  require_valid(b, "corner_distance");
  return corner_distance_raw(a.x - b.x, a.y - b.y, std::cos(a.h), std::sin(a.h), std::cos(b.h),
                             std::sin(b.h), 0.5 * m.length(), 0.5 * m.width());
}

AgentState to_local(const AgentState& frame, const AgentState& s) {
  require_valid(frame, "to_local");
  if (!s.valid) return AgentState::invalid();
  const double c = std::cos(frame.h), sn = std::sin(frame.h);
  const double dx = s.x - frame.x, dy = s.y - frame.y;
  return {c * dx + sn * dy, -sn * dx + c * dy, wrap_angle(s.h - frame.h), true};
}

AgentState to_global(const AgentState& frame, const AgentState& s_local) {
  require_valid(frame, "to_global");
  if (!s_local.valid) return AgentState::invalid();
  const double c = std::cos(frame.h), sn = std::sin(frame.h);
  return {frame.x + c * s_local.x - sn * s_local.y, frame.y + sn * s_local.x + c * s_local.y,
          wrap_angle(frame.h + s_local.h), true};
}

bool boxes_overlap(const AgentState& a, const AgentMeta& ma, const AgentState& b,
                   const AgentMeta& mb) {
  require_valid(a, "boxes_overlap");
  require_valid(b, "boxes_overlap");
  const BoxCorners ca = corners(a, ma);
  const BoxCorners cb = corners(b, mb);
  const std::array<Vec2, 4> axes = {Vec2{std::cos(a.h), std::sin(a.h)},
                                    Vec2{-std::sin(a.h), std::cos(a.h)},
                                    Vec2{std::cos(b.h), std::sin(b.h)},
                                    Vec2{-std::sin(b.h), std::cos(b.h)}};
  for (const Vec2& ax : axes) {
    double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
    for (int k = 0; k < 4; ++k) {
      const double pa = ca[k].x * ax.x + ca[k].y * ax.y;
      const double pb = cb[k].x * ax.x + cb[k].y * ax.y;
      amin = std::min(amin, pa);
      amax = std::max(amax, pa);
      bmin = std::min(bmin, pb);
      bmax = std::max(bmax, pb);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

}  // namespace trajeglish
