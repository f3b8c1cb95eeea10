#pragma once

#include <limits>

#include "telldrive/sim/types.hpp"

namespace telldrive::sim {

struct IdmResult {
  double accel = 0.0;
  /// Set when a lead vehicle is present with a non-positive gap.
  bool infraction = false;
};

inline constexpr double kNoLeader = std::numeric_limits<double>::infinity();

/// Intelligent Driver Model acceleration, clamped to [-comfort_decel, max_accel].
/// `gap` is bumper-to-bumper distance; pass kNoLeader for a free road.
IdmResult idm_accel(double gap, double v, double v_lead, const DriverProfile& profile);

/// Desired dynamic gap s* = s0 + max(0, v*T + v*dv / (2 sqrt(a b))).
double idm_desired_gap(double v, double v_lead, const DriverProfile& profile);

/// Inputs to the MOBIL lane-change criterion for one candidate lane.
struct MobilInputs {
  double accel_current = 0.0;       // a_c before the change
  double accel_after = 0.0;         // a~_c after the change
  double new_follower_before = 0.0; // a_n
  double new_follower_after = 0.0;  // a~_n
  double old_follower_before = 0.0; // a_o
  double old_follower_after = 0.0;  // a~_o
};

/// Safety: a~_n >= -comfort_decel. Incentive:
/// a~_c - a_c + p*((a~_n - a_n) + (a~_o - a_o)) > threshold.
bool mobil_accepts(const MobilInputs& in, const DriverProfile& profile);

}  // namespace telldrive::sim
