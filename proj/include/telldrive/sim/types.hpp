#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "telldrive/sim/geometry.hpp"

namespace telldrive::sim {

/// High-level maneuvers. The integer values are the policy head's action indices.
enum class Maneuver : int { SlowDown = 0, Cruise = 1, SpeedUp = 2, TurnLeft = 3, TurnRight = 4 };

inline constexpr int kNumManeuvers = 5;
inline constexpr std::array<Maneuver, kNumManeuvers> kAllManeuvers = {
    Maneuver::SlowDown, Maneuver::Cruise, Maneuver::SpeedUp, Maneuver::TurnLeft,
    Maneuver::TurnRight};

/// Snake-case token used in prompts, traces and teacher replies ("slow_down", ...).
std::string_view to_token(Maneuver m);
std::optional<Maneuver> maneuver_from_token(std::string_view token);
Maneuver maneuver_from_index(int index);
inline int to_index(Maneuver m) { return static_cast<int>(m); }

enum class ScenarioKind { Intersection, Merge, Highway };
std::string_view to_string(ScenarioKind kind);
std::optional<ScenarioKind> scenario_kind_from_string(std::string_view name);

enum class ProfileKind { Conservative, Standard, Aggressive };
std::string_view to_string(ProfileKind kind);

struct DriverProfile {
  ProfileKind name = ProfileKind::Standard;
  double desired_speed = 25.0;        // m/s
  double time_headway = 1.5;          // s
  double max_accel = 3.0;             // m/s^2
  double comfort_decel = 5.0;         // m/s^2, also the emergency clamp b_max
  double min_gap = 2.0;               // m
  double politeness = 0.3;            // [0,1]
  double lane_change_accel_gain_threshold = 0.2;  // m/s^2

  /// Standard/conservative/aggressive variants around a scenario's desired speed:
  /// +-20% on speed and acceleration, -+0.5 s on headway.
  static DriverProfile make(ProfileKind kind, double standard_desired_speed);
};

struct VehicleState {
  int id = 0;
  Vec2 position;
  double speed = 0.0;    // m/s, >= 0
  double heading = 0.0;  // rad, (-pi, pi]
  int lane = 0;          // lane id in the scenario's road network
  double length = 5.0;
  double width = 2.0;
  DriverProfile profile;
  bool is_ego = false;

  // Controller state.
  int target_lane = 0;
  /// Extra lateral offset (m, left positive) relative to target_lane's centre;
  /// nonzero only while steering toward a lane that does not exist.
  double target_offset = 0.0;
  double target_speed = 0.0;
  double steering = 0.0;
  bool emergency_braked = false;

  Vec2 velocity() const { return heading_vector(heading) * speed; }
  Box box() const { return {position, heading, length, width}; }
};

enum class Axis { X, Y };

/// Ego is successful once it is on one of `lanes` with its coordinate along
/// `axis` at least `threshold`.
struct SuccessRegion {
  std::vector<int> lanes;
  Axis axis = Axis::X;
  double threshold = 0.0;
};

struct RewardConfig {
  double v_lo = 15.0;
  double v_hi = 30.0;
  double w_speed = 0.4;
  double w_collision = 1.0;
  double w_off_road = 1.0;
  double w_success = 1.0;
};

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::Merge;
  int n_background = 5;
  double spawn_speed_mean = 25.0;
  double spawn_speed_std = 3.0;
  double disturbance_fraction = 0.15;
  double dt_physics = 0.1;
  double decision_period = 1.0;
  int horizon = 30;
  SuccessRegion success_region;
  RewardConfig reward;
  double ego_initial_speed = 18.0;
  /// Standard-profile desired speed; other profiles scale from it.
  double desired_speed = 25.0;
  int neighbor_slots = 6;
  double sensing_radius = 100.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
  int substeps() const;

  static ScenarioConfig preset(ScenarioKind kind);
  /// Merge with 5 background vehicles: the desk-scale default.
  static ScenarioConfig merge_lite();
};

enum class Event : std::uint8_t { Collision = 1, OffRoad = 2, Success = 4, Timeout = 8 };

class EventSet {
 public:
  void add(Event e) { bits_ |= static_cast<std::uint8_t>(e); }
  bool has(Event e) const { return bits_ & static_cast<std::uint8_t>(e); }
  bool empty() const { return bits_ == 0; }
  bool terminal() const { return !empty(); }
  std::vector<std::string> names() const;
  bool operator==(const EventSet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

inline constexpr int kNeighborFeatures = 6;
using FeatureColumn = std::array<double, kNeighborFeatures>;

/// Ego block [x, y, vx, vy, cos th, sin th] in world coordinates, plus one
/// column per neighbor slot [dx, dy, dvx, dvy, cos th_k, sin th_k] with the
/// relative position/velocity rotated into the ego heading frame. Columns are
/// sorted by distance; unused slots are zero.
struct Observation {
  FeatureColumn ego{};
  std::vector<FeatureColumn> neighbors;
  std::vector<int> neighbor_ids;  // id per filled column
  int neighbor_count = 0;

  std::size_t slots() const { return neighbors.size(); }
};

struct TtcpEntry {
  int vehicle_id = 0;
  double tau = 0.0;
  double min_distance = 0.0;
};

struct StepInfo {
  double min_distance = 0.0;  // to the nearest background vehicle, +inf if none
  std::vector<TtcpEntry> ttcp;
  bool emergency_clamp = false;
};

struct StepOutcome {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  EventSet events;
  StepInfo info;
};

}  // namespace telldrive::sim
