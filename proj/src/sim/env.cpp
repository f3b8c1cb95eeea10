#include "telldrive/sim/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <numbers>
#include <numeric>
#include <random>

#include "telldrive/errors.hpp"
#include "telldrive/risk/risk.hpp"
#include "telldrive/sim/idm.hpp"

namespace telldrive::sim {
namespace {

constexpr double kWheelbaseRatio = 0.6;
constexpr double kSpawnSpacing = 14.0;  // m between spawned vehicles in a lane
constexpr double kHeadingLookahead = 0.2;  // s of travel for the lane-heading feed-forward

struct SpawnSpec {
  std::vector<int> lanes;
  double s_min = 0.0;
  double s_max = 0.0;
  int ego_lane = 0;
  double ego_s = 0.0;
};

SpawnSpec spawn_spec(ScenarioKind kind) {
  using namespace layout;
  switch (kind) {
    case ScenarioKind::Merge:
      return {{0, 1}, -100.0 - kMergeRoadStart, 350.0 - kMergeRoadStart, 2, 20.0};
    case ScenarioKind::Highway:
      return {{0, 1, 2, 3}, -100.0 - kHighwayStart, 400.0 - kHighwayStart, 1, -kHighwayStart};
    case ScenarioKind::Intersection:
      return {{2, 3, 4}, 0.0, 100.0, 0, kIntersectionReach - 50.0};
  }
  return {};
}

VehicleState place(const RoadNetwork& road, int id, int lane_id, double s, double speed,
                   const DriverProfile& profile) {
  const auto& lane = road.lane(lane_id);
  VehicleState v;
  v.id = id;
  v.position = lane.position(s);
  v.heading = lane.heading_at(s);
  v.speed = speed;
  v.lane = lane_id;
  v.target_lane = lane_id;
  v.target_speed = speed;
  v.profile = profile;
  return v;
}

double wheelbase(const VehicleState& v) { return kWheelbaseRatio * v.length; }

/// Arc-length position of `v` along `lane_id`.
double s_on(const RoadNetwork& road, const VehicleState& v, int lane_id) {
  return road.lane(lane_id).project(v.position).s;
}

struct Neighbor {
  const VehicleState* vehicle = nullptr;
  double gap = kNoLeader;  // bumper to bumper
};

/// Nearest vehicle ahead of (or behind, when `ahead` is false) position `s` in
/// `lane_id`, skipping `self`. Vehicles count as in the lane when it is their
/// lane or their lane-change target.
Neighbor find_neighbor(const ScenarioState& st, const VehicleState& self, int lane_id, double s,
                       bool ahead) {
  Neighbor best;
  double best_ds = std::numeric_limits<double>::infinity();
  for (const auto& other : st.vehicles) {
    if (other.id == self.id) continue;
    if (other.lane != lane_id && other.target_lane != lane_id) continue;
    const double ds = (s_on(*st.road, other, lane_id) - s) * (ahead ? 1.0 : -1.0);
    if (ds < 0.0 || (ds == 0.0 && !ahead)) continue;
    if (ds < best_ds) {
      best_ds = ds;
      best.vehicle = &other;
      best.gap = ds - 0.5 * (self.length + other.length);
    }
  }
  return best;
}

double idm_for(const VehicleState& v, const Neighbor& leader) {
  if (!leader.vehicle) return idm_accel(kNoLeader, v.speed, 0.0, v.profile).accel;
  return idm_accel(leader.gap, v.speed, leader.vehicle->speed, v.profile).accel;
}

/// Accel of `follower` if `leader` sat at arc position `leader_s` in `lane_id`.
double idm_behind(const RoadNetwork& road, const VehicleState& follower, const VehicleState* leader,
                  int lane_id) {
  if (!leader) return idm_accel(kNoLeader, follower.speed, 0.0, follower.profile).accel;
  const double gap = s_on(road, *leader, lane_id) - s_on(road, follower, lane_id) -
                     0.5 * (leader->length + follower.length);
  return idm_accel(gap, follower.speed, leader->speed, follower.profile).accel;
}

/// MOBIL gain for moving `v` into `target`, or nullopt when unsafe/unprofitable.
std::optional<double> mobil_gain(const ScenarioState& st, const VehicleState& v, int target) {
  const auto& road = *st.road;
  const auto& lane = road.lane(target);
  if (!lane.through) return std::nullopt;
  const double s_target = s_on(road, v, target);
  if (s_target < 0.0 || s_target > lane.length()) return std::nullopt;
  const double s_here = s_on(road, v, v.lane);

  const auto leader_now = find_neighbor(st, v, v.lane, s_here, true);
  const auto leader_new = find_neighbor(st, v, target, s_target, true);
  const auto follower_new = find_neighbor(st, v, target, s_target, false);
  const auto follower_old = find_neighbor(st, v, v.lane, s_here, false);
  if (leader_new.vehicle && leader_new.gap <= 0.0) return std::nullopt;
  if (follower_new.vehicle && follower_new.gap <= 0.0) return std::nullopt;

  MobilInputs in;
  in.accel_current = idm_for(v, leader_now);
  in.accel_after = idm_for(v, leader_new);
  if (follower_new.vehicle) {
    const auto& n = *follower_new.vehicle;
    in.new_follower_before = idm_behind(road, n, leader_new.vehicle, target);
    in.new_follower_after = idm_accel(follower_new.gap, n.speed, v.speed, n.profile).accel;
  }
  if (follower_old.vehicle) {
    const auto& o = *follower_old.vehicle;
    in.old_follower_before = idm_accel(follower_old.gap, o.speed, v.speed, o.profile).accel;
    in.old_follower_after = idm_behind(road, o, leader_now.vehicle, v.lane);
  }
  if (!mobil_accepts(in, v.profile)) return std::nullopt;
  return in.accel_after - in.accel_current;
}

void background_lane_decisions(ScenarioState& st) {
  if (st.config.kind == ScenarioKind::Intersection) return;
  std::vector<int> choices(st.vehicles.size(), -1);
  for (std::size_t i = 1; i < st.vehicles.size(); ++i) {
    const auto& v = st.vehicles[i];
    if (v.lane != v.target_lane) continue;
    const auto& lane = st.road->lane(v.lane);
    std::optional<double> best;
    for (auto candidate : {lane.left, lane.right}) {
      if (!candidate) continue;
      auto gain = mobil_gain(st, v, *candidate);
      if (gain && (!best || *gain > *best)) {
        best = gain;
        choices[i] = *candidate;
      }
    }
  }
  for (std::size_t i = 1; i < st.vehicles.size(); ++i)
    if (choices[i] >= 0) st.vehicles[i].target_lane = choices[i];
}

void apply_maneuver(ScenarioState& st, Maneuver m) {
  auto& ego = st.ego();
  const auto& gains = st.gains;
  const double v_cap = 1.5 * ego.profile.desired_speed;
  switch (m) {
    case Maneuver::SlowDown:
      ego.target_speed = std::clamp(ego.target_speed - gains.speed_step, 0.0, v_cap);
      break;
    case Maneuver::SpeedUp:
      ego.target_speed = std::clamp(ego.target_speed + gains.speed_step, 0.0, v_cap);
      break;
    case Maneuver::Cruise:
      break;
    case Maneuver::TurnLeft:
    case Maneuver::TurnRight: {
      const bool left = m == Maneuver::TurnLeft;
      if (ego.target_offset != 0.0) break;  // already leaving the road
      const auto& lane = st.road->lane(ego.target_lane);
      const auto neighbor = left ? lane.left : lane.right;
      if (neighbor) {
        ego.target_lane = *neighbor;
      } else {
        ego.target_offset = (left ? 1.0 : -1.0) * kLaneWidth;
      }
      break;
    }
  }
}

/// Lane-keeping / lane-change steering: lateral error -> lateral speed ->
/// heading reference -> yaw rate -> bicycle steering angle.
double steering_command(const RoadNetwork& road, const VehicleState& v, const ControllerGains& g) {
  const auto& lane = road.lane(v.target_lane);
  const auto c = lane.project(v.position);
  const double error = c.lateral - v.target_offset;
  const double speed = std::max(v.speed, 1.0);
  const double lateral_speed = -g.lateral * error;
  const double heading_offset =
      std::clamp(std::asin(std::clamp(lateral_speed / speed, -1.0, 1.0)), -std::numbers::pi / 4,
                 std::numbers::pi / 4);
  const double s_ahead = std::clamp(c.s + v.speed * kHeadingLookahead, 0.0, lane.length());
  const double heading_ref = lane.heading_at(s_ahead) + heading_offset;
  const double yaw_rate = g.heading * wrap_angle(heading_ref - v.heading);
  const double steer = std::atan(wheelbase(v) * yaw_rate / std::max(v.speed, 0.5));
  return std::clamp(steer, -g.max_steering, g.max_steering);
}

void integrate(VehicleState& v, double accel, double steer, double dt) {
  v.steering = steer;
  v.position = v.position + heading_vector(v.heading) * (v.speed * dt);
  v.heading = wrap_angle(v.heading + v.speed / wheelbase(v) * std::tan(steer) * dt);
  v.speed = std::max(0.0, v.speed + accel * dt);
}

/// Lane-change completion and lane-to-lane hand-over. Returns false when a
/// background vehicle ran off the end of its road and should despawn.
bool update_lane(const RoadNetwork& road, VehicleState& v) {
  if (v.target_lane != v.lane) {
    const auto c = road.lane(v.target_lane).project(v.position);
    if (std::abs(c.lateral) < 0.5 * kLaneWidth) v.lane = v.target_lane;
  }
  const auto& lane = road.lane(v.lane);
  if (lane.project(v.position).s > lane.length()) {
    if (lane.next) {
      if (v.target_lane == v.lane) v.target_lane = *lane.next;
      v.lane = *lane.next;
    } else if (!v.is_ego) {
      return false;
    }
  }
  return true;
}

}  // namespace

bool collides(const VehicleState& a, const VehicleState& b) { return boxes_overlap(a.box(), b.box()); }

std::pair<ScenarioState, Observation> reset(const ScenarioConfig& config, std::uint64_t seed) {
  config.validate();
  ScenarioState st;
  st.config = config;
  st.config.seed = seed;
  st.road = RoadNetwork::build(config.kind);
  std::mt19937_64 rng(seed);

  const auto spec = spawn_spec(config.kind);
  auto ego_profile = DriverProfile::make(ProfileKind::Standard, config.desired_speed);
  auto ego = place(*st.road, 0, spec.ego_lane, spec.ego_s, config.ego_initial_speed, ego_profile);
  ego.is_ego = true;
  st.vehicles.push_back(ego);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> speed_dist(config.spawn_speed_mean, config.spawn_speed_std);
  for (int i = 0; i < config.n_background; ++i) {
    const double u = unit(rng);
    const auto kind = u < 0.3 ? ProfileKind::Conservative
                              : (u < 0.7 ? ProfileKind::Standard : ProfileKind::Aggressive);
    const auto profile = DriverProfile::make(kind, config.desired_speed);

    double speed = -1.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double draw = speed_dist(rng);
      if (draw >= 0.0 && draw <= 1.5 * profile.desired_speed) {
        speed = draw;
        break;
      }
    }
    if (speed < 0.0) speed = std::clamp(config.spawn_speed_mean, 0.0, 1.5 * profile.desired_speed);

    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      const int lane = spec.lanes[static_cast<std::size_t>(unit(rng) * spec.lanes.size()) %
                                  spec.lanes.size()];
      const double s = spec.s_min + unit(rng) * (spec.s_max - spec.s_min);
      auto candidate = place(*st.road, i + 1, lane, s, speed, profile);
      bool clear = true;
      for (const auto& other : st.vehicles) {
        const double spacing = other.is_ego ? 2.0 * kSpawnSpacing : kSpawnSpacing;
        if (norm(other.position - candidate.position) < spacing &&
            (other.lane == lane || collides(other, candidate))) {
          clear = false;
          break;
        }
      }
      if (clear) {
        st.vehicles.push_back(candidate);
        placed = true;
      }
    }
    if (!placed) {
      throw ConfigError("scenario.n_background",
                        "cannot place " + std::to_string(config.n_background) + " vehicles");
    }
  }

  // Abnormal-speed disturbance: a fixed-size random subset keeps an atypical
  // speed for the whole episode.
  const int n_disturbed =
      static_cast<int>(std::lround(config.disturbance_fraction * config.n_background));
  std::vector<std::size_t> order(static_cast<std::size_t>(config.n_background));
  std::iota(order.begin(), order.end(), 1);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_real_distribution<double> disturbed(0.3 * config.spawn_speed_mean,
                                                   1.7 * config.spawn_speed_mean);
  for (int k = 0; k < n_disturbed; ++k) {
    auto& v = st.vehicles[order[static_cast<std::size_t>(k)]];
    v.speed = disturbed(rng);
    v.target_speed = v.speed;
    v.profile.desired_speed = std::max(v.speed, 1.0);
  }

  auto obs = observe(st);
  return {std::move(st), std::move(obs)};
}

StepOutcome step(ScenarioState& st, Maneuver maneuver) {
  if (st.terminal) throw UsageError("step() called on a terminal scenario state");
  apply_maneuver(st, maneuver);
  background_lane_decisions(st);

  const auto& road = *st.road;
  const double dt = st.config.dt_physics;
  EventSet events;
  StepInfo info;
  for (auto& v : st.vehicles) v.emergency_braked = false;

  for (int k = 0; k < st.config.substeps() && events.empty(); ++k) {
    std::vector<double> accel(st.vehicles.size());
    std::vector<double> steer(st.vehicles.size());
    for (std::size_t i = 0; i < st.vehicles.size(); ++i) {
      auto& v = st.vehicles[i];
      steer[i] = steering_command(road, v, st.gains);
      if (v.is_ego) {
        accel[i] = std::clamp(st.gains.longitudinal * (v.target_speed - v.speed),
                              -v.profile.comfort_decel, v.profile.max_accel);
        continue;
      }
      auto leader = find_neighbor(st, v, v.lane, s_on(road, v, v.lane), true);
      IdmResult r = leader.vehicle ? idm_accel(leader.gap, v.speed, leader.vehicle->speed, v.profile)
                                   : idm_accel(kNoLeader, v.speed, 0.0, v.profile);
      if (v.target_lane != v.lane) {
        auto other = find_neighbor(st, v, v.target_lane, s_on(road, v, v.target_lane), true);
        if (other.vehicle) {
          auto r2 = idm_accel(other.gap, v.speed, other.vehicle->speed, v.profile);
          if (r2.accel < r.accel) r = r2;
        }
      }
      if (r.infraction) {
        v.emergency_braked = true;
        info.emergency_clamp = true;
      }
      accel[i] = r.accel;
    }
    for (std::size_t i = 0; i < st.vehicles.size(); ++i) integrate(st.vehicles[i], accel[i], steer[i], dt);

    std::vector<VehicleState> kept;
    kept.reserve(st.vehicles.size());
    for (auto& v : st.vehicles)
      if (update_lane(road, v)) kept.push_back(std::move(v));
    st.vehicles = std::move(kept);
    st.time += dt;

    const auto& ego = st.ego();
    for (std::size_t i = 1; i < st.vehicles.size(); ++i) {
      if (collides(ego, st.vehicles[i])) {
        events.add(Event::Collision);
        break;
      }
    }
    if (!events.has(Event::Collision)) {
      if (!road.ego_on_road(ego.position)) {
        events.add(Event::OffRoad);
      } else if (in_success_region(st)) {
        events.add(Event::Success);
      }
    }
  }

  ++st.step_count;
  if (events.empty() && st.step_count >= st.config.horizon) events.add(Event::Timeout);
  st.terminal = events.terminal();

  StepOutcome out;
  out.events = events;
  out.done = st.terminal;
  out.reward = reward(st, maneuver, events);
  info.min_distance = std::numeric_limits<double>::infinity();
  const auto& ego = st.ego();
  for (std::size_t i = 1; i < st.vehicles.size(); ++i) {
    const auto& other = st.vehicles[i];
    info.min_distance = std::min(info.min_distance, norm(other.position - ego.position));
    info.ttcp.push_back({other.id, risk::ttcp(ego, other, st.risk),
                         risk::closest_approach(ego, other, st.risk.horizon).distance});
  }
  out.info = std::move(info);
  out.observation = observe(st);
  return out;
}

Observation observe(const ScenarioState& st) {
  const auto& ego = st.ego();
  const auto n_slots = static_cast<std::size_t>(st.config.neighbor_slots);
  Observation obs;
  const Vec2 v = ego.velocity();
  obs.ego = {ego.position.x, ego.position.y, v.x, v.y, std::cos(ego.heading), std::sin(ego.heading)};
  obs.neighbors.assign(n_slots, FeatureColumn{});

  struct Candidate {
    double distance;
    int id;
    const VehicleState* vehicle;
  };
  std::vector<Candidate> candidates;
  for (std::size_t i = 1; i < st.vehicles.size(); ++i) {
    const auto& other = st.vehicles[i];
    const double d = norm(other.position - ego.position);
    if (d <= st.config.sensing_radius) candidates.push_back({d, other.id, &other});
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  const std::size_t count = std::min(n_slots, candidates.size());
  for (std::size_t k = 0; k < count; ++k) {
    const auto& other = *candidates[k].vehicle;
    const Vec2 dp = rotate_into(other.position - ego.position, ego.heading);
    const Vec2 dv = rotate_into(other.velocity() - v, ego.heading);
    obs.neighbors[k] = {dp.x, dp.y, dv.x, dv.y, std::cos(other.heading), std::sin(other.heading)};
    obs.neighbor_ids.push_back(other.id);
  }
  obs.neighbor_count = static_cast<int>(count);
  return obs;
}

double reward(const ScenarioState& st, Maneuver, const EventSet& events) {
  const auto& r = st.config.reward;
  const double speed_term = std::clamp((st.ego().speed - r.v_lo) / (r.v_hi - r.v_lo), 0.0, 1.0);
  double total = r.w_speed * speed_term;
  if (events.has(Event::Collision)) total -= r.w_collision;
  if (events.has(Event::OffRoad)) total -= r.w_off_road;
  if (events.has(Event::Success)) total += r.w_success;
  return total;
}

bool in_success_region(const ScenarioState& st) {
  const auto& region = st.config.success_region;
  const auto& ego = st.ego();
  if (std::find(region.lanes.begin(), region.lanes.end(), ego.lane) == region.lanes.end()) return false;
  const double coord = region.axis == Axis::X ? ego.position.x : ego.position.y;
  return coord >= region.threshold;
}

int goal_lane_change(const ScenarioState& st) {
  if (st.config.kind == ScenarioKind::Merge && !st.road->lane(st.ego().target_lane).through) return 1;
  return 0;
}

double ego_tracking_error(const ScenarioState& st) {
  const auto& ego = st.ego();
  return st.road->lane(ego.target_lane).project(ego.position).lateral - ego.target_offset;
}

}  // namespace telldrive::sim
