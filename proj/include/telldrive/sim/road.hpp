#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "telldrive/sim/geometry.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::sim {

inline constexpr double kLaneWidth = 4.0;

/// Position along a lane: arc length `s` from the lane start and signed
/// lateral offset `lateral` (left positive).
struct LaneCoord {
  double s = 0.0;
  double lateral = 0.0;
};

/// Straight segment or circular arc of constant width.
class Lane {
 public:
  static Lane straight(int id, Vec2 start, Vec2 end);
  /// Arc around `center`; `start_angle` is the polar angle of the start point,
  /// `sweep` the signed angle travelled (positive = counter-clockwise = left turn).
  static Lane arc(int id, Vec2 center, double radius, double start_angle, double sweep);

  int id() const { return id_; }
  double length() const { return length_; }
  double width() const { return kLaneWidth; }

  Vec2 position(double s, double lateral = 0.0) const;
  double heading_at(double s) const;
  LaneCoord project(Vec2 p) const;
  /// Inside the paved strip: 0 <= s <= length and |lateral| <= width/2.
  bool contains(Vec2 p) const;

  std::optional<int> left;
  std::optional<int> right;
  std::optional<int> next;
  /// Background vehicles may change into this lane (excludes on-ramps).
  bool through = true;

 private:
  int id_ = 0;
  bool is_arc_ = false;
  Vec2 start_;
  Vec2 dir_;
  Vec2 center_;
  double radius_ = 0.0;
  double start_angle_ = 0.0;
  double sweep_sign_ = 1.0;
  double length_ = 0.0;
};

struct RoadNetwork {
  std::vector<Lane> lanes;
  /// Lanes the ego may legally occupy; leaving them is an off-road event.
  std::vector<int> ego_lanes;

  const Lane& lane(int id) const { return lanes.at(static_cast<std::size_t>(id)); }
  bool ego_on_road(Vec2 p) const;

  static std::shared_ptr<const RoadNetwork> build(ScenarioKind kind);
};

// Geometry constants shared by the scenario builders and tests.
namespace layout {
// Merge: mainline lanes 0 (left) and 1 (right) run along +x; lane 2 is the
// 200 m acceleration lane to their right.
inline constexpr double kMergeRampStart = 0.0;
inline constexpr double kMergeRampEnd = 200.0;
inline constexpr double kMergeRoadStart = -150.0;
inline constexpr double kMergeRoadEnd = 700.0;
// Highway: four lanes 0..3 from left to right.
inline constexpr double kHighwayStart = -150.0;
inline constexpr double kHighwayEnd = 1200.0;
// Intersection: ego approaches eastbound (lane 0), turns left on arc lane 1
// into the northbound lane 2. Lane 3 is southbound, lane 4 westbound (oncoming).
inline constexpr double kIntersectionReach = 120.0;
inline constexpr double kTurnRadius = 10.0;
}  // namespace layout

}  // namespace telldrive::sim
