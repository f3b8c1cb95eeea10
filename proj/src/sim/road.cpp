#include "telldrive/sim/road.hpp"

#include <numbers>

namespace telldrive::sim {

Lane Lane::straight(int id, Vec2 start, Vec2 end) {
  Lane lane;
  lane.id_ = id;
  lane.start_ = start;
  lane.length_ = norm(end - start);
  lane.dir_ = (end - start) * (1.0 / lane.length_);
  return lane;
}

Lane Lane::arc(int id, Vec2 center, double radius, double start_angle, double sweep) {
  Lane lane;
  lane.id_ = id;
  lane.is_arc_ = true;
  lane.center_ = center;
  lane.radius_ = radius;
  lane.start_angle_ = start_angle;
  lane.sweep_sign_ = sweep >= 0.0 ? 1.0 : -1.0;
  lane.length_ = radius * std::abs(sweep);
  return lane;
}

Vec2 Lane::position(double s, double lateral) const {
  if (!is_arc_) {
    const Vec2 left{-dir_.y, dir_.x};
    return start_ + dir_ * s + left * lateral;
  }
  const double phi = start_angle_ + sweep_sign_ * s / radius_;
  const double r = radius_ - sweep_sign_ * lateral;
  return center_ + Vec2{std::cos(phi), std::sin(phi)} * r;
}

double Lane::heading_at(double s) const {
  if (!is_arc_) return std::atan2(dir_.y, dir_.x);
  const double phi = start_angle_ + sweep_sign_ * s / radius_;
  return wrap_angle(phi + sweep_sign_ * std::numbers::pi / 2.0);
}

LaneCoord Lane::project(Vec2 p) const {
  if (!is_arc_) {
    const Vec2 d = p - start_;
    return {dot(d, dir_), cross(dir_, d)};
  }
  const Vec2 d = p - center_;
  const double phi = std::atan2(d.y, d.x);
  const double s = sweep_sign_ * wrap_angle(phi - start_angle_) * radius_;
  const double lateral = sweep_sign_ * (radius_ - norm(d));
  return {s, lateral};
}

bool Lane::contains(Vec2 p) const {
  const auto c = project(p);
  return c.s >= 0.0 && c.s <= length_ && std::abs(c.lateral) <= 0.5 * width();
}

bool RoadNetwork::ego_on_road(Vec2 p) const {
  for (int id : ego_lanes)
    if (lane(id).contains(p)) return true;
  return false;
}

std::shared_ptr<const RoadNetwork> RoadNetwork::build(ScenarioKind kind) {
  using namespace layout;
  auto road = std::make_shared<RoadNetwork>();
  switch (kind) {
    case ScenarioKind::Merge: {
      road->lanes.push_back(Lane::straight(0, {kMergeRoadStart, 0.0}, {kMergeRoadEnd, 0.0}));
      road->lanes.push_back(
          Lane::straight(1, {kMergeRoadStart, -kLaneWidth}, {kMergeRoadEnd, -kLaneWidth}));
      road->lanes.push_back(Lane::straight(2, {kMergeRampStart, -2.0 * kLaneWidth},
                                           {kMergeRampEnd, -2.0 * kLaneWidth}));
      road->lanes[0].right = 1;
      road->lanes[1].left = 0;
      road->lanes[2].left = 1;
      road->lanes[2].through = false;
      road->ego_lanes = {0, 1, 2};
      break;
    }
    case ScenarioKind::Highway: {
      for (int k = 0; k < 4; ++k) {
        const double y = -kLaneWidth * k;
        road->lanes.push_back(Lane::straight(k, {kHighwayStart, y}, {kHighwayEnd, y}));
        if (k > 0) road->lanes[k].left = k - 1;
        if (k < 3) road->lanes[k].right = k + 1;
        road->ego_lanes.push_back(k);
      }
      break;
    }
    case ScenarioKind::Intersection: {
      const double half = 0.5 * kLaneWidth;
      const double stop = kTurnRadius - half;  // approach ends where the arc starts
      road->lanes.push_back(Lane::straight(0, {-kIntersectionReach, -half}, {-stop, -half}));
      road->lanes.push_back(Lane::arc(1, {-stop, stop}, kTurnRadius, -std::numbers::pi / 2.0,
                                      std::numbers::pi / 2.0));
      road->lanes.push_back(Lane::straight(2, {half, -kIntersectionReach}, {half, kIntersectionReach}));
      road->lanes.push_back(Lane::straight(3, {-half, kIntersectionReach}, {-half, -kIntersectionReach}));
      road->lanes.push_back(Lane::straight(4, {kIntersectionReach, half}, {-kIntersectionReach, half}));
      road->lanes[0].next = 1;
      road->lanes[1].next = 2;
      road->ego_lanes = {0, 1, 2};
      break;
    }
  }
  return road;
}

}  // namespace telldrive::sim
