#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "telldrive/errors.hpp"
#include "telldrive/risk/risk.hpp"

using namespace telldrive;
using namespace telldrive::sim;
using namespace telldrive::risk;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

VehicleState moving(Vec2 p, Vec2 v, int id = 1) {
  VehicleState s;
  s.id = id;
  s.position = p;
  s.speed = norm(v);
  s.heading = s.speed > 0.0 ? std::atan2(v.y, v.x) : 0.0;
  return s;
}

// Grid search for the distance minimiser over [0, horizon] at 0.01 s.
std::pair<double, double> grid_oracle(const VehicleState& a, const VehicleState& b, double horizon) {
  const Vec2 dp = b.position - a.position;
  const Vec2 dv = b.velocity() - a.velocity();
  double best_t = 0.0, best_d = norm(dp);
  const int n = static_cast<int>(std::lround(horizon / 0.01));
  for (int i = 1; i <= n; ++i) {
    const double t = i * 0.01;
    const double d = norm(dp + dv * t);
    if (d < best_d) {
      best_d = d;
      best_t = t;
    }
  }
  return {best_t, best_d};
}

// Ranges built by enumerating each index and walking backwards to the run start.
std::vector<IndexRange> ranges_oracle(const std::vector<double>& omegas, double delta) {
  std::vector<IndexRange> out;
  for (std::size_t i = 0; i < omegas.size(); ++i) {
    const bool hot = omegas[i] >= delta;
    const bool run_end = hot && (i + 1 == omegas.size() || omegas[i + 1] < delta);
    if (!run_end) continue;
    std::size_t start = i;
    while (start > 0 && omegas[start - 1] >= delta) --start;
    out.push_back({start >= 2 ? start - 2 : 0, i});
  }
  return out;
}

}  // namespace

TEST_CASE("ttcp head-on example") {
  RiskParams p;
  p.horizon = 60.0;
  const auto ego = moving({0, 0}, {0, 0});
  const auto other = moving({100, 0}, {-10, 0});
  CHECK(ttcp(ego, other, p) == doctest::Approx(10.0));
  const auto [t_grid, d_grid] = grid_oracle(ego, other, 60.0);
  CHECK(std::abs(ttcp(ego, other, p) - t_grid) <= 0.01);
}

TEST_CASE("ttcp parallel motion is no conflict") {
  RiskParams p;
  CHECK(ttcp(moving({0, 0}, {20, 0}), moving({50, 0}, {20, 0}, 2), p) == kInf);
  // Equal velocity inside the radius: conflict now.
  CHECK(ttcp(moving({0, 0}, {20, 0}), moving({3, 0}, {20, 0}, 2), p) == 0.0);
}

TEST_CASE("ttcp diverging vehicles clamp to zero") {
  RiskParams p;
  CHECK(ttcp(moving({0, 0}, {0, 0}), moving({3, 0}, {5, 0}), p) == 0.0);
  CHECK(ttcp(moving({0, 0}, {0, 0}), moving({30, 0}, {5, 0}), p) == kInf);
}

TEST_CASE("ttcp closed form matches a 0.01 s grid oracle on 1000 pairs") {
  RiskParams p;
  p.conflict_radius = 1e9;  // compare minimisers without the radius gate
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> pos(-80.0, 80.0), vel(-30.0, 30.0);
  for (int i = 0; i < 1000; ++i) {
    const auto a = moving({pos(rng), pos(rng)}, {vel(rng), vel(rng)});
    const auto b = moving({pos(rng), pos(rng)}, {vel(rng), vel(rng)}, 2);
    const auto ca = closest_approach(a, b, p.horizon);
    const auto [t_grid, d_grid] = grid_oracle(a, b, p.horizon);
    CHECK(std::abs(ca.time - t_grid) <= 0.01 + 1e-9);
    CHECK(ca.distance <= d_grid + 1e-9);
    CHECK(ttcp(a, b, p) == ca.time);
  }
}

TEST_CASE("ttcp is invariant under joint scaling of positions and velocities") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> pos(-50.0, 50.0), vel(-20.0, 20.0), k(0.1, 10.0);
  for (int i = 0; i < 500; ++i) {
    const Vec2 pa{pos(rng), pos(rng)}, pb{pos(rng), pos(rng)}, va{vel(rng), vel(rng)}, vb{vel(rng), vel(rng)};
    const double s = k(rng);
    RiskParams p;
    RiskParams scaled = p;
    scaled.conflict_radius *= s;  // the radius is a length, so it scales with the scene
    const double t0 = ttcp(moving(pa, va), moving(pb, vb), p);
    const double t1 = ttcp(moving(pa * s, va * s), moving(pb * s, vb * s), scaled);
    if (std::isinf(t0)) {
      CHECK(std::isinf(t1));
    } else {
      CHECK(t1 == doctest::Approx(t0).epsilon(1e-9));
    }
    const auto c0 = closest_approach(moving(pa, va), moving(pb, vb), p.horizon);
    const auto c1 = closest_approach(moving(pa * s, va * s), moving(pb * s, vb * s), p.horizon);
    CHECK(c1.time == doctest::Approx(c0.time).epsilon(1e-9));
  }
}

TEST_CASE("assess: empty traffic, singleton and brute-force minimum") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Highway);
  cfg.n_background = 0;
  auto [st, obs] = reset(cfg, 1);
  RiskParams p;
  auto a = assess(st, p);
  CHECK(a.tau_min == kInf);
  CHECK_FALSE(a.risky);
  CHECK(a.critical() == nullptr);

  st.ego().speed = 0.0;
  const auto ego = st.ego();
  st.vehicles.push_back(moving(ego.position + Vec2{30, 0}, {-10, 0}, 1));
  a = assess(st, p);
  CHECK(a.tau_min == doctest::Approx(3.0));
  CHECK(a.risky);
  REQUIRE(a.critical() != nullptr);
  CHECK(a.critical()->vehicle_id == 1);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pos(-40.0, 40.0), vel(-15.0, 15.0);
  for (int trial = 0; trial < 50; ++trial) {
    st.vehicles.resize(1);
    for (int i = 1; i <= 5; ++i)
      st.vehicles.push_back(moving(ego.position + Vec2{pos(rng), pos(rng)}, {vel(rng), vel(rng)}, i));
    a = assess(st, p);
    double brute = kInf;
    for (std::size_t i = 1; i < st.vehicles.size(); ++i) brute = std::min(brute, ttcp(ego, st.vehicles[i], p));
    CHECK(a.tau_min == brute);
    CHECK(a.per_vehicle.size() == 5);
    for (const auto& c : a.per_vehicle) CHECK(c.tau >= 0.0);
  }
}

TEST_CASE("omega examples") {
  RiskParams p;
  CHECK(omega(2.0, false, p) == doctest::Approx(0.5));
  CHECK(omega(kInf, true, p) == doctest::Approx(10.0));
  CHECK(omega(0.05, true, p) == doctest::Approx(20.0));
  CHECK(omega(kInf, false, p) == 0.0);
  CHECK(std::isfinite(omega(0.0, false, p)));
}

TEST_CASE("omega is non-negative and zero only without conflict or infraction") {
  RiskParams p;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> tau(0.0, 20.0);
  for (int i = 0; i < 1000; ++i) {
    const double t = i % 5 == 0 ? kInf : tau(rng);
    const bool inf = i % 3 == 0;
    const double w = omega(t, inf, p);
    CHECK(w >= 0.0);
    CHECK((w == 0.0) == (std::isinf(t) && !inf));
  }
}

TEST_CASE("risk rolls the maneuver forward one decision period") {
  auto cfg = ScenarioConfig::preset(ScenarioKind::Highway);
  cfg.n_background = 0;
  auto [st, obs] = reset(cfg, 1);
  RiskParams p;
  CHECK(risk::risk(st, Maneuver::Cruise, {}, p) == 0.0);
  // Stopped car 60 m ahead: cruising at 22 m/s keeps closing, hard braking less so.
  auto& ego = st.ego();
  VehicleState stopped = moving(ego.position + Vec2{60, 0}, {0, 0}, 1);
  stopped.lane = stopped.target_lane = ego.lane;
  stopped.profile.desired_speed = 1e-3;
  st.vehicles.push_back(stopped);
  const double cruise = risk::risk(st, Maneuver::Cruise, {}, p);
  const double brake = risk::risk(st, Maneuver::SlowDown, {}, p);
  CHECK(cruise > 0.0);
  CHECK(brake < cruise);
  // Original state untouched.
  CHECK(st.step_count == 0);
  EventSet crash;
  crash.add(Event::Collision);
  CHECK(risk::risk(st, Maneuver::Cruise, crash, p) >= p.beta);
}

TEST_CASE("flag_ranges examples") {
  const double d = 5.0;
  CHECK(flag_ranges(std::vector<double>(10, 0.0), d).empty());
  std::vector<double> one(10, 0.0);
  one[7] = d;
  CHECK(flag_ranges(one, d) == std::vector<IndexRange>{{5, 7}});
  const std::vector<double> pattern = {0, d, d, 0, d};
  CHECK(flag_ranges(pattern, d) == std::vector<IndexRange>{{0, 2}, {2, 4}});
  CHECK(flag_ranges(pattern, d) == ranges_oracle(pattern, d));
}

TEST_CASE("flag_ranges matches the brute-force oracle and covers exactly the flagged indices") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> om(1 + rng() % 40);
    for (auto& x : om) x = u(rng);
    const auto ranges = flag_ranges(om, 5.0);
    CHECK(ranges == ranges_oracle(om, 5.0));
    std::set<std::size_t> expected;
    for (std::size_t i = 0; i < om.size(); ++i) {
      if (om[i] < 5.0) continue;
      for (std::size_t j = i >= 2 ? i - 2 : 0; j <= i; ++j) expected.insert(j);
    }
    std::set<std::size_t> covered;
    for (const auto& r : ranges)
      for (std::size_t j = r.first; j <= r.last; ++j) covered.insert(j);
    CHECK(covered == expected);
    for (std::size_t k = 1; k < ranges.size(); ++k) CHECK(ranges[k - 1].last < ranges[k].last);
  }
}

TEST_CASE("delta_ttcp_metric") {
  CHECK(delta_ttcp_metric(std::vector<double>{kInf, kInf}, 6.0) == 6.0);
  CHECK(delta_ttcp_metric(std::vector<double>{1.3}, 6.0) == doctest::Approx(1.3));
  CHECK(delta_ttcp_metric(std::vector<double>{1.0, 2.0, kInf}, 6.0) == doctest::Approx(3.0));
  CHECK_THROWS_AS(delta_ttcp_metric(std::vector<double>{}, 6.0), UsageError);
}

TEST_CASE("risk params validation names the field") {
  RiskParams p;
  p.beta = 0.0;
  try {
    p.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "risk.beta");
  }
}
