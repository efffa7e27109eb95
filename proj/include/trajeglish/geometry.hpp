#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace trajeglish {

// Wraps an angle into (-pi, pi].
double wrap_angle(double h);

/// Pose of one agent at one timestep. Invalid states are all-zero by convention.
struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double h = 0.0;
  bool valid = false;

  static AgentState make(double x, double y, double h) { return {x, y, wrap_angle(h), true}; }
  static AgentState invalid() { return {}; }

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

enum class AgentClass : std::uint8_t { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };
inline constexpr std::size_t kNumAgentClasses = 3;

std::string_view to_string(AgentClass c);
AgentClass agent_class_from_string(std::string_view s);

/// Box dimensions and object class. Degenerate boxes are rejected on construction.
class AgentMeta {
 public:
  AgentMeta(double length, double width, AgentClass cls = AgentClass::kVehicle);

  static AgentMeta unit_box() { return AgentMeta(1.0, 1.0); }

  double length() const { return length_; }
  double width() const { return width_; }
  AgentClass cls() const { return cls_; }

  friend bool operator==(const AgentMeta&, const AgentMeta&) = default;

 private:
  double length_;
  double width_;
  AgentClass cls_;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Corner order is fixed: front-left, front-right, rear-right, rear-left.
using BoxCorners = std::array<Vec2, 4>;

BoxCorners corners(const AgentState& s, const AgentMeta& m);

// Mean L2 distance between corresponding corners of two l x w boxes.
double corner_distance(const AgentState& a, const AgentState& b, const AgentMeta& m);

// Same metric without validity checks; hot loops in the tokenizer call this.
// (cos, sin) of both headings are passed in precomputed.
inline double corner_distance_raw(double dx, double dy, double ca, double sa, double cb,
                                  double sb, double half_l, double half_w);

AgentState to_local(const AgentState& frame, const AgentState& s);
AgentState to_global(const AgentState& frame, const AgentState& s_local);

// True iff the two oriented rectangles intersect (touching counts as overlap).
bool boxes_overlap(const AgentState& a, const AgentMeta& ma, const AgentState& b,
                   const AgentMeta& mb);

}  // namespace trajeglish

#include <cmath>

namespace trajeglish {

inline double corner_distance_raw(double dx, double dy, double ca, double sa, double cb,
                                  double sb, double half_l, double half_w) {
  // Corner k of a box is center + R(h) u_k; the corner-wise difference is
  // (center_a - center_b) + (R(ha) - R(hb)) u_k.
  const double dc = ca - cb;
  const double ds = sa - sb;
  const double ax = dc * half_l, ay = ds * half_l;  // (R_a - R_b) * (half_l, 0)
  const double bx = -ds * half_w, by = dc * half_w; // (R_a - R_b) * (0, half_w)
  const double d0 = std::hypot(dx + ax + bx, dy + ay + by);
  const double d1 = std::hypot(dx + ax - bx, dy + ay - by);
  const double d2 = std::hypot(dx - ax - bx, dy - ay - by);
  const double d3 = std::hypot(dx - ax + bx, dy - ay + by);
  return 0.25 * (d0 + d1 + d2 + d3);
}

}  // namespace trajeglish
