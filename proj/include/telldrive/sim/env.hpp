#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "telldrive/risk/params.hpp"
#include "telldrive/sim/road.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::sim {

/// Low-level controller gains for the ego's maneuver execution.
struct ControllerGains {
  double lateral = 1.0;       // 1/s, lateral error -> lateral speed command
  double heading = 5.0;       // 1/s, heading error -> yaw-rate command
  double longitudinal = 0.5;  // 1/s, speed error -> acceleration
  double speed_step = 2.0;    // m/s target change per SpeedUp/SlowDown
  double max_steering = 0.6;  // rad
};

/// Complete, copyable simulator state. The road network is shared and immutable.
struct ScenarioState {
  ScenarioConfig config;
  std::shared_ptr<const RoadNetwork> road;
  std::vector<VehicleState> vehicles;  // vehicles[0] is the ego
  risk::RiskParams risk;
  ControllerGains gains;
  int step_count = 0;
  double time = 0.0;
  bool terminal = false;

  const VehicleState& ego() const { return vehicles.front(); }
  VehicleState& ego() { return vehicles.front(); }
};

/// Spawns the ego and background traffic. Identical (config, seed) pairs give
/// bit-identical states; `config.seed` is ignored in favour of `seed`.
std::pair<ScenarioState, Observation> reset(const ScenarioConfig& config, std::uint64_t seed);

/// Advances one decision period. Throws UsageError on a terminal state.
StepOutcome step(ScenarioState& state, Maneuver maneuver);

Observation observe(const ScenarioState& state);

double reward(const ScenarioState& state, Maneuver maneuver, const EventSet& events);

/// Ego is inside its scenario's success region.
bool in_success_region(const ScenarioState& state);

/// Rectangle-overlap collision test.
bool collides(const VehicleState& a, const VehicleState& b);

/// Lane-change direction that the scenario goal still requires of the ego
/// (judged from the lane it is tracking, so an ongoing change counts as done)
/// (+1 left, -1 right), or 0 when none is needed.
int goal_lane_change(const ScenarioState& state);

/// Ego lateral offset from the centre of its tracked (target) lane, m.
double ego_tracking_error(const ScenarioState& state);

}  // namespace telldrive::sim
