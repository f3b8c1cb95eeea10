#include "telldrive/sim/types.hpp"

#include <cmath>

#include "telldrive/errors.hpp"
#include "telldrive/sim/road.hpp"

namespace telldrive::sim {

std::string_view to_token(Maneuver m) {
  switch (m) {
    case Maneuver::SlowDown: return "slow_down";
    case Maneuver::Cruise: return "cruise";
    case Maneuver::SpeedUp: return "speed_up";
    case Maneuver::TurnLeft: return "turn_left";
    case Maneuver::TurnRight: return "turn_right";
  }
  return "cruise";
}

std::optional<Maneuver> maneuver_from_token(std::string_view token) {
  for (auto m : kAllManeuvers)
    if (to_token(m) == token) return m;
  return std::nullopt;
}

Maneuver maneuver_from_index(int index) {
  if (index < 0 || index >= kNumManeuvers) {
    throw UsageError("maneuver index out of range: " + std::to_string(index));
  }
  return static_cast<Maneuver>(index);
}

std::string_view to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::Intersection: return "intersection";
    case ScenarioKind::Merge: return "merge";
    case ScenarioKind::Highway: return "highway";
  }
  return "merge";
}

std::optional<ScenarioKind> scenario_kind_from_string(std::string_view name) {
  if (name == "intersection") return ScenarioKind::Intersection;
  if (name == "merge") return ScenarioKind::Merge;
  if (name == "highway") return ScenarioKind::Highway;
  return std::nullopt;
}

std::string_view to_string(ProfileKind kind) {
  switch (kind) {
    case ProfileKind::Conservative: return "conservative";
    case ProfileKind::Standard: return "standard";
    case ProfileKind::Aggressive: return "aggressive";
  }
  return "standard";
}

DriverProfile DriverProfile::make(ProfileKind kind, double standard_desired_speed) {
  DriverProfile p;
  p.name = kind;
  p.desired_speed = standard_desired_speed;
  switch (kind) {
    case ProfileKind::Conservative:
      p.desired_speed *= 0.8;
      p.max_accel *= 0.8;
      p.time_headway += 0.5;
      p.politeness = 0.5;
      break;
    case ProfileKind::Standard:
      break;
    case ProfileKind::Aggressive:
      p.desired_speed *= 1.2;
      p.max_accel *= 1.2;
      p.time_headway -= 0.5;
      p.politeness = 0.1;
      break;
  }
  return p;
}

std::vector<std::string> EventSet::names() const {
  std::vector<std::string> out;
  if (has(Event::Collision)) out.emplace_back("collision");
  if (has(Event::OffRoad)) out.emplace_back("off_road");
  if (has(Event::Success)) out.emplace_back("success");
  if (has(Event::Timeout)) out.emplace_back("timeout");
  return out;
}

void ScenarioConfig::validate() const {
  if (n_background < 0) throw ConfigError("scenario.n_background", "must be >= 0");
  if (spawn_speed_mean <= 0.0) throw ConfigError("scenario.spawn_speed_mean", "must be > 0");
  if (spawn_speed_std < 0.0) throw ConfigError("scenario.spawn_speed_std", "must be >= 0");
  if (!(disturbance_fraction >= 0.0 && disturbance_fraction <= 1.0)) {
    throw ConfigError("scenario.disturbance_fraction", "must lie in [0, 1]");
  }
  if (!(dt_physics > 0.0)) throw ConfigError("scenario.dt_physics", "must be > 0");
  const double ratio = decision_period / dt_physics;
  if (!(decision_period > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0) {
    throw ConfigError("scenario.decision_period", "must be a positive integer multiple of dt_physics");
  }
  if (horizon <= 0) throw ConfigError("scenario.horizon", "must be > 0");
  if (desired_speed <= 0.0) throw ConfigError("scenario.desired_speed", "must be > 0");
  if (ego_initial_speed < 0.0) throw ConfigError("scenario.ego_initial_speed", "must be >= 0");
  if (neighbor_slots <= 0) throw ConfigError("scenario.neighbor_slots", "must be > 0");
  if (sensing_radius <= 0.0) throw ConfigError("scenario.sensing_radius", "must be > 0");
  if (!(reward.v_hi > reward.v_lo)) throw ConfigError("scenario.reward.v_hi", "must exceed v_lo");
  if (success_region.lanes.empty()) {
    throw ConfigError("scenario.success_region.lanes", "must name at least one lane");
  }
}

int ScenarioConfig::substeps() const {
  return static_cast<int>(std::lround(decision_period / dt_physics));
}

ScenarioConfig ScenarioConfig::preset(ScenarioKind kind) {
  ScenarioConfig c;
  c.kind = kind;
  switch (kind) {
    case ScenarioKind::Intersection:
      c.n_background = 8;
      c.spawn_speed_mean = 8.0;
      c.spawn_speed_std = 1.5;
      c.desired_speed = 8.0;
      c.ego_initial_speed = 6.0;
      c.horizon = 25;
      c.success_region = {{2}, Axis::Y, 40.0};
      c.reward = {0.0, 10.0, 0.4, 1.0, 1.0, 1.0};
      break;
    case ScenarioKind::Merge:
      c.n_background = 12;
      c.spawn_speed_mean = 25.0;
      c.spawn_speed_std = 3.0;
      c.desired_speed = 25.0;
      c.ego_initial_speed = 18.0;
      c.horizon = 30;
      c.success_region = {{0, 1}, Axis::X, 300.0};
      c.reward = {15.0, 30.0, 0.4, 1.0, 1.0, 1.0};
      break;
    case ScenarioKind::Highway:
      c.n_background = 20;
      c.spawn_speed_mean = 25.0;
      c.spawn_speed_std = 3.0;
      c.desired_speed = 25.0;
      c.ego_initial_speed = 22.0;
      c.horizon = 40;
      c.success_region = {{0, 1, 2, 3}, Axis::X, 500.0};
      c.reward = {20.0, 30.0, 0.4, 1.0, 1.0, 1.0};
      break;
  }
  return c;
}

ScenarioConfig ScenarioConfig::merge_lite() {
  auto c = preset(ScenarioKind::Merge);
  c.n_background = 5;
  return c;
}

}  // namespace telldrive::sim
