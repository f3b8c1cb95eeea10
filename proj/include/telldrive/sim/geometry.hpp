#pragma once

#include <array>
#include <cmath>
#include <numbers>

namespace telldrive::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2&) const = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 heading_vector(double heading) { return {std::cos(heading), std::sin(heading)}; }

/// World vector -> frame rotated by `heading` (x along heading, y to its left).
inline Vec2 rotate_into(Vec2 v, double heading) {
  const double c = std::cos(heading), s = std::sin(heading);
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}
inline Vec2 rotate_out_of(Vec2 v, double heading) {
  const double c = std::cos(heading), s = std::sin(heading);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Wraps to (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a <= 0.0) a += two_pi;
  return a - std::numbers::pi;
}

/// Oriented rectangle centred on `center`.
struct Box {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Vec2, 4> corners() const {
    const Vec2 f = heading_vector(heading) * (0.5 * length);
    const Vec2 l = Vec2{-std::sin(heading), std::cos(heading)} * (0.5 * width);
    return {center + f + l, center + f - l, center - f - l, center - f + l};
  }
};

/// Separating-axis test on the four edge normals. Touching counts as overlap.
inline bool boxes_overlap(const Box& a, const Box& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const std::array<Vec2, 4> axes = {heading_vector(a.heading),
                                    Vec2{-std::sin(a.heading), std::cos(a.heading)},
                                    heading_vector(b.heading),
                                    Vec2{-std::sin(b.heading), std::cos(b.heading)}};
  for (const auto& axis : axes) {
    double amin = dot(ca[0], axis), amax = amin;
    double bmin = dot(cb[0], axis), bmax = bmin;
    for (int i = 1; i < 4; ++i) {
      const double pa = dot(ca[i], axis), pb = dot(cb[i], axis);
      amin = std::min(amin, pa);
      amax = std::max(amax, pa);
      bmin = std::min(bmin, pb);
      bmax = std::max(bmax, pb);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

}  // namespace telldrive::sim
