#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "telldrive/errors.hpp"
#include "telldrive/sim/env.hpp"
#include "telldrive/sim/idm.hpp"
#include "telldrive/sim/trace.hpp"

using namespace telldrive;
using namespace telldrive::sim;

namespace {

ScenarioConfig empty_highway() {
  auto c = ScenarioConfig::preset(ScenarioKind::Highway);
  c.n_background = 0;
  return c;
}

VehicleState background(int id, Vec2 p, double heading, double speed, int lane) {
  VehicleState v;
  v.id = id;
  v.position = p;
  v.heading = heading;
  v.speed = speed;
  v.lane = lane;
  v.target_lane = lane;
  v.target_speed = speed;
  return v;
}

// Straight evaluation of the IDM formula, kept separate from the library.
double idm_oracle(double gap, double v, double v_lead, const DriverProfile& p) {
  const double dynamic = v * p.time_headway + v * (v - v_lead) / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
  const double s_star = p.min_gap + std::max(0.0, dynamic);
  const double a = p.max_accel * (1.0 - std::pow(v / p.desired_speed, 4) - std::pow(s_star / gap, 2));
  return std::clamp(a, -p.comfort_decel, p.max_accel);
}

bool same_vehicles(const ScenarioState& a, const ScenarioState& b) {
  if (a.vehicles.size() != b.vehicles.size()) return false;
  for (std::size_t i = 0; i < a.vehicles.size(); ++i) {
    const auto& x = a.vehicles[i];
    const auto& y = b.vehicles[i];
    if (x.id != y.id || !(x.position == y.position) || x.speed != y.speed || x.heading != y.heading ||
        x.lane != y.lane || x.target_lane != y.target_lane ||
        x.profile.desired_speed != y.profile.desired_speed)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("reset is deterministic per seed") {
  const auto cfg = ScenarioConfig::preset(ScenarioKind::Merge);
  auto [a, oa] = reset(cfg, 7);
  auto [b, ob] = reset(cfg, 7);
  CHECK(same_vehicles(a, b));
  auto [c, oc] = reset(cfg, 8);
  CHECK_FALSE(same_vehicles(a, c));
}

TEST_CASE("trajectories are bit-identical for a fixed maneuver sequence") {
  for (auto kind : {ScenarioKind::Merge, ScenarioKind::Highway, ScenarioKind::Intersection}) {
    const auto cfg = ScenarioConfig::preset(kind);
    auto [a, oa] = reset(cfg, 11);
    auto [b, ob] = reset(cfg, 11);
    std::mt19937 rng(3);
    while (!a.terminal) {
      const auto m = maneuver_from_index(static_cast<int>(rng() % kNumManeuvers));
      const auto ra = step(a, m);
      const auto rb = step(b, m);
      REQUIRE(same_vehicles(a, b));
      CHECK(ra.reward == rb.reward);
      CHECK(ra.events == rb.events);
      CHECK(ra.observation.neighbors == rb.observation.neighbors);
      CHECK(ra.done == rb.done);
    }
    CHECK(b.terminal);
  }
}

TEST_CASE("disturbance subset size is round(fraction * n)") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Highway);
  cfg.n_background = 20;
  cfg.disturbance_fraction = 0.15;
  auto [st, obs] = reset(cfg, 5);
  REQUIRE(st.vehicles.size() == 21);
  // Undisturbed vehicles keep their profile's desired speed; disturbed ones
  // drive at their resampled speed.
  int disturbed = 0;
  for (std::size_t i = 1; i < st.vehicles.size(); ++i) {
    const auto& v = st.vehicles[i];
    const auto standard = DriverProfile::make(v.profile.name, cfg.desired_speed);
    if (v.profile.desired_speed != standard.desired_speed) {
      ++disturbed;
      CHECK(v.speed >= 0.3 * cfg.spawn_speed_mean);
      CHECK(v.speed <= 1.7 * cfg.spawn_speed_mean);
    } else {
      CHECK(v.speed >= 0.0);
      CHECK(v.speed <= 1.5 * v.profile.desired_speed);
    }
  }
  CHECK(disturbed == 3);
}

TEST_CASE("empty traffic gives an all-zero neighbor matrix") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Merge);
  cfg.n_background = 0;
  auto [st, obs] = reset(cfg, 1);
  CHECK(st.vehicles.size() == 1);
  CHECK(obs.neighbor_count == 0);
  CHECK(obs.slots() == 6);
  for (const auto& col : obs.neighbors)
    for (double f : col) CHECK(f == 0.0);
}

TEST_CASE("invalid config names the field") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Merge);
  cfg.disturbance_fraction = 1.5;
  try {
    reset(cfg, 1);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "scenario.disturbance_fraction");
  }
  cfg = ScenarioConfig::preset(ScenarioKind::Merge);
  cfg.decision_period = 0.25;
  cfg.dt_physics = 0.1;
  CHECK_THROWS_AS(reset(cfg, 1), ConfigError);
}

TEST_CASE("cruise at desired speed holds speed") {
  auto cfg = empty_highway();
  cfg.ego_initial_speed = cfg.desired_speed;
  auto [st, obs] = reset(cfg, 1);
  const double v0 = st.ego().speed;
  step(st, Maneuver::Cruise);
  CHECK(std::abs(st.ego().speed - v0) < 0.1);
}

TEST_CASE("step on a terminal state is a usage error") {
  auto cfg = empty_highway();
  cfg.horizon = 1;
  auto [st, obs] = reset(cfg, 1);
  const auto out = step(st, Maneuver::Cruise);
  CHECK(out.done);
  CHECK(out.events.has(Event::Timeout));
  CHECK_THROWS_AS(step(st, Maneuver::Cruise), UsageError);
}

TEST_CASE("overlap produces a terminal collision with its penalty") {
  auto cfg = empty_highway();
  auto [st, obs] = reset(cfg, 1);
  auto& ego = st.ego();
  // Stationary obstacle 8 m ahead of a 22 m/s ego.
  st.vehicles.push_back(background(1, ego.position + Vec2{8.0, 0.0}, 0.0, 0.0, ego.lane));
  st.vehicles.back().profile.desired_speed = 1e-3;
  const auto out = step(st, Maneuver::Cruise);
  CHECK(out.events.has(Event::Collision));
  CHECK_FALSE(out.events.has(Event::Success));
  CHECK(out.done);
  CHECK(out.reward <= -1.0 + cfg.reward.w_speed);
}

TEST_CASE("turn left from highway lane 2 approaches lane 1 monotonically") {
  auto cfg = empty_highway();
  cfg.decision_period = cfg.dt_physics;  // one sub-step per call exposes the sub-step trajectory
  cfg.horizon = 100;
  auto [st, obs] = reset(cfg, 1);
  auto& ego = st.ego();
  const auto& lane2 = st.road->lane(2);
  ego.position = lane2.position(200.0);
  ego.lane = ego.target_lane = 2;
  step(st, Maneuver::TurnLeft);
  CHECK(st.ego().target_lane == 1);
  const auto& lane1 = st.road->lane(1);
  double prev = std::abs(lane1.project(st.ego().position).lateral);
  for (int k = 1; k < 10; ++k) {
    step(st, Maneuver::Cruise);
    const double now = std::abs(lane1.project(st.ego().position).lateral);
    CHECK(now < prev);
    prev = now;
  }
  // The change completes without overshooting beyond half a lane.
  for (int k = 0; k < 80; ++k) step(st, Maneuver::Cruise);
  CHECK(st.ego().lane == 1);
  CHECK(std::abs(lane1.project(st.ego().position).lateral) < 0.2);
}

TEST_CASE("turning off the outer lane is an off-road event") {
  auto cfg = empty_highway();
  auto [st, obs] = reset(cfg, 1);
  auto& ego = st.ego();
  ego.position = st.road->lane(0).position(200.0);
  ego.lane = ego.target_lane = 0;
  bool off = false;
  for (int k = 0; k < 6 && !off; ++k) off = step(st, Maneuver::TurnLeft).events.has(Event::OffRoad);
  CHECK(off);
}

TEST_CASE("staying on the acceleration lane past its end is an off-road event") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Merge);
  cfg.n_background = 0;
  auto [st, obs] = reset(cfg, 1);
  const int ramp = st.ego().lane;
  bool off = false;
  while (!st.terminal) {
    const auto out = step(st, Maneuver::SpeedUp);
    CHECK(st.ego().lane == ramp);
    off = out.events.has(Event::OffRoad);
  }
  CHECK(off);
}

TEST_CASE("observe: neighbor 10 m ahead at the same velocity") {
  auto cfg = empty_highway();
  auto [st, obs] = reset(cfg, 1);
  const auto& ego = st.ego();
  st.vehicles.push_back(background(1, ego.position + Vec2{10.0, 0.0}, ego.heading, ego.speed, ego.lane));
  const auto o = observe(st);
  REQUIRE(o.neighbor_count == 1);
  const FeatureColumn expected = {10.0, 0.0, 0.0, 0.0, 1.0, 0.0};
  for (int f = 0; f < kNeighborFeatures; ++f) CHECK(o.neighbors[0][f] == doctest::Approx(expected[f]).epsilon(1e-12));
  for (std::size_t k = 1; k < o.slots(); ++k)
    for (double x : o.neighbors[k]) CHECK(x == 0.0);
}

TEST_CASE("observe keeps the N nearest, distance sorted") {
  auto cfg = empty_highway();
  auto [st, obs] = reset(cfg, 1);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-60.0, 60.0), h(-3.0, 3.0);
  const Vec2 c = st.ego().position;
  for (int i = 1; i <= 8; ++i) st.vehicles.push_back(background(i, c + Vec2{u(rng), u(rng)}, h(rng), 10.0, 0));
  const auto o = observe(st);
  // Brute-force oracle.
  std::vector<std::pair<double, int>> ranked;
  for (std::size_t i = 1; i < st.vehicles.size(); ++i)
    ranked.push_back({norm(st.vehicles[i].position - c), st.vehicles[i].id});
  std::sort(ranked.begin(), ranked.end());
  REQUIRE(o.neighbor_count == 6);
  for (int k = 0; k < 6; ++k) CHECK(o.neighbor_ids[k] == ranked[k].second);
  for (int k = 1; k < 6; ++k) {
    CHECK(std::hypot(o.neighbors[k][0], o.neighbors[k][1]) >= std::hypot(o.neighbors[k - 1][0], o.neighbors[k - 1][1]));
  }
}

TEST_CASE("observation frame round-trips to world coordinates") {
  for (auto kind : {ScenarioKind::Merge, ScenarioKind::Highway, ScenarioKind::Intersection}) {
    auto [st, obs] = reset(ScenarioConfig::preset(kind), 21);
    for (int t = 0; t < 5 && !st.terminal; ++t) {
      const auto out = step(st, Maneuver::TurnLeft);
      const auto& ego = st.ego();
      for (int k = 0; k < out.observation.neighbor_count; ++k) {
        const auto& col = out.observation.neighbors[k];
        const int id = out.observation.neighbor_ids[k];
        const auto it = std::find_if(st.vehicles.begin(), st.vehicles.end(), [&](const VehicleState& v) { return v.id == id; });
        REQUIRE(it != st.vehicles.end());
        const Vec2 p = ego.position + rotate_out_of({col[0], col[1]}, ego.heading);
        const Vec2 v = ego.velocity() + rotate_out_of({col[2], col[3]}, ego.heading);
        CHECK(norm(p - it->position) < 1e-9);
        CHECK(norm(v - it->velocity()) < 1e-9);
        CHECK(std::abs(col[4] - std::cos(it->heading)) < 1e-12);
        CHECK(std::abs(col[5] - std::sin(it->heading)) < 1e-12);
      }
    }
  }
}

TEST_CASE("reward formula") {
  auto cfg = empty_highway();
  auto [st, obs] = reset(cfg, 1);
  st.ego().speed = cfg.reward.v_hi;
  CHECK(reward(st, Maneuver::Cruise, {}) == doctest::Approx(0.4));
  EventSet collision;
  collision.add(Event::Collision);
  for (double v : {0.0, 20.0, 25.0, 40.0}) {
    st.ego().speed = v;
    CHECK(reward(st, Maneuver::Cruise, collision) <= -1.0 + cfg.reward.w_speed);
  }
  st.ego().speed = 25.0;
  EventSet success;
  success.add(Event::Success);
  CHECK(reward(st, Maneuver::Cruise, success) == doctest::Approx(0.4 * 0.5 + 1.0));
}

TEST_CASE("idm examples") {
  DriverProfile p;
  p.desired_speed = 25.0;
  CHECK(idm_accel(kNoLeader, 25.0, 0.0, p).accel == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(idm_accel(kNoLeader, 0.0, 0.0, p).accel == doctest::Approx(p.max_accel));
  // Following at the desired speed: the interaction term alone decides the sign.
  p.desired_speed = 20.0;
  const double s_star = idm_desired_gap(20.0, 20.0, p);
  CHECK(s_star == doctest::Approx(p.min_gap + 20.0 * p.time_headway));
  const auto r = idm_accel(2.0 * s_star, 20.0, 20.0, p);
  CHECK(r.accel < 0.0);
  CHECK(r.accel == doctest::Approx(idm_oracle(2.0 * s_star, 20.0, 20.0, p)).epsilon(1e-12));
  const auto crash = idm_accel(-0.5, 10.0, 5.0, p);
  CHECK(crash.infraction);
  CHECK(crash.accel == -p.comfort_decel);
}

TEST_CASE("idm matches the direct formula on random inputs") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> gap(0.5, 200.0), v(0.0, 35.0);
  for (int i = 0; i < 500; ++i) {
    DriverProfile p = DriverProfile::make(static_cast<ProfileKind>(i % 3), 25.0);
    const double g = gap(rng), a = v(rng), b = v(rng);
    const auto r = idm_accel(g, a, b, p);
    CHECK_FALSE(r.infraction);
    CHECK(r.accel == doctest::Approx(idm_oracle(g, a, b, p)).epsilon(1e-12));
  }
}

TEST_CASE("physics sanity: speed bounds and per-sub-step speed change") {
  for (auto kind : {ScenarioKind::Merge, ScenarioKind::Highway, ScenarioKind::Intersection}) {
    auto cfg = ScenarioConfig::preset(kind);
    cfg.decision_period = cfg.dt_physics;
    cfg.horizon = 300;
    auto [st, obs] = reset(cfg, 4);
    std::mt19937 rng(1);
    Maneuver m = Maneuver::Cruise;
    for (int t = 0; !st.terminal; ++t) {
      if (t % 10 == 0) m = maneuver_from_index(static_cast<int>(rng() % kNumManeuvers));
      const auto before = st.vehicles;
      step(st, t % 10 == 0 ? m : Maneuver::Cruise);
      for (const auto& v : st.vehicles) {
        CHECK(v.speed >= 0.0);
        CHECK(v.heading > -std::numbers::pi);
        CHECK(v.heading <= std::numbers::pi);
        const auto it = std::find_if(before.begin(), before.end(), [&](const VehicleState& b) { return b.id == v.id; });
        REQUIRE(it != before.end());
        const double bound = std::max(v.profile.max_accel, v.profile.comfort_decel) * cfg.dt_physics;
        CHECK(std::abs(v.speed - it->speed) <= bound + 1e-12);
      }
    }
  }
}

TEST_CASE("episodes terminate within the horizon; done iff events") {
  for (auto kind : {ScenarioKind::Merge, ScenarioKind::Highway, ScenarioKind::Intersection}) {
    const auto cfg = ScenarioConfig::preset(kind);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto [st, obs] = reset(cfg, seed);
      std::mt19937 rng(static_cast<unsigned>(seed));
      int steps = 0;
      bool done = false;
      while (!done) {
        const auto out = step(st, maneuver_from_index(static_cast<int>(rng() % kNumManeuvers)));
        ++steps;
        done = out.done;
        CHECK(out.done == out.events.terminal());
        CHECK_FALSE((out.events.has(Event::Collision) && out.events.has(Event::Success)));
      }
      CHECK(steps <= cfg.horizon);
    }
  }
}

TEST_CASE("collision test is symmetric") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-6.0, 6.0), h(-3.14, 3.14);
  int hits = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto a = background(1, {u(rng), u(rng)}, h(rng), 0.0, 0);
    const auto b = background(2, {u(rng), u(rng)}, h(rng), 0.0, 0);
    CHECK(collides(a, b) == collides(b, a));
    hits += collides(a, b);
  }
  CHECK(hits > 0);
  CHECK(hits < 2000);
}

TEST_CASE("merge goal: ramp requires a left change") {
  auto [st, obs] = reset(ScenarioConfig::merge_lite(), 3);
  CHECK(st.ego().lane == 2);
  CHECK(goal_lane_change(st) == 1);
  auto [hw, o2] = reset(ScenarioConfig::preset(ScenarioKind::Highway), 3);
  CHECK(goal_lane_change(hw) == 0);
}

TEST_CASE("intersection ego follows the left turn onto the northbound lane") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Intersection);
  cfg.n_background = 0;
  auto [st, obs] = reset(cfg, 1);
  StepOutcome out;
  while (!st.terminal) out = step(st, Maneuver::Cruise);
  CHECK(out.events.has(Event::Success));
  CHECK(st.ego().lane == 2);
}

TEST_CASE("trace record rebuilds a state that steps identically") {
  const auto cfg = ScenarioConfig::merge_lite();
  auto [st, obs] = reset(cfg, 11);
  const std::vector<Maneuver> plan{Maneuver::SpeedUp, Maneuver::TurnLeft, Maneuver::Cruise, Maneuver::SlowDown};
  step(st, Maneuver::Cruise);
  const auto line = trace_record(st, Maneuver::Cruise, 0.0, {}).dump();
  auto rebuilt = state_from_trace(nlohmann::json::parse(line), cfg);
  REQUIRE(rebuilt.vehicles.size() == st.vehicles.size());
  CHECK(rebuilt.step_count == st.step_count);
  for (auto m : plan) {
    if (st.terminal) break;
    const auto a = step(st, m);
    const auto b = step(rebuilt, m);
    CHECK(a.reward == b.reward);
    CHECK(a.events == b.events);
    for (std::size_t i = 0; i < st.vehicles.size(); ++i) {
      CHECK(st.vehicles[i].position.x == rebuilt.vehicles[i].position.x);
      CHECK(st.vehicles[i].position.y == rebuilt.vehicles[i].position.y);
      CHECK(st.vehicles[i].speed == rebuilt.vehicles[i].speed);
    }
  }
}

TEST_CASE("trace record fields and malformed records") {
  auto [st, obs] = reset(ScenarioConfig::preset(ScenarioKind::Highway), 3);
  EventSet ev;
  ev.add(Event::Collision);
  const auto j = trace_record(st, Maneuver::TurnLeft, -0.7, ev);
  CHECK(j["scenario"] == "highway");
  CHECK(j["maneuver"] == "turn_left");
  CHECK(j["neighbors"].size() == st.vehicles.size() - 1);
  CHECK(j["events"][0] == "collision");
  CHECK(j["ego"]["speed"].get<double>() == st.ego().speed);

  auto bad = j;
  bad["ego"]["lane"] = 99;
  CHECK_THROWS_AS(state_from_trace(bad, st.config), std::invalid_argument);
  bad = j;
  bad.erase("neighbors");
  CHECK_THROWS_AS(state_from_trace(bad, st.config), std::invalid_argument);
  bad = j;
  bad["scenario"] = "roundabout";
  CHECK_THROWS_AS(state_from_trace(bad, st.config), std::invalid_argument);
}

TEST_CASE("five-step return matches a hand-computed oracle") {
  const auto cfg = ScenarioConfig::merge_lite();
  auto [st, obs] = reset(cfg, 5);
  const std::vector<Maneuver> plan{Maneuver::SpeedUp, Maneuver::SpeedUp, Maneuver::TurnLeft, Maneuver::Cruise,
                                   Maneuver::Cruise};
  double got = 0.0, expected = 0.0;
  for (auto m : plan) {
    if (st.terminal) break;
    const auto out = step(st, m);
    got += out.reward;
    // speed term over [15, 30] with weight 0.4, plus +-1 event terms
    double r = 0.4 * std::min(1.0, std::max(0.0, (st.ego().speed - 15.0) / 15.0));
    if (out.events.has(Event::Collision)) r -= 1.0;
    if (out.events.has(Event::OffRoad)) r -= 1.0;
    if (out.events.has(Event::Success)) r += 1.0;
    expected += r;
  }
  CHECK(expected > 0.0);
  CHECK(std::abs(got - expected) <= 0.1 * std::abs(expected));
}
