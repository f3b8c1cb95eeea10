#include "telldrive/sim/idm.hpp"

#include <algorithm>
#include <cmath>

namespace telldrive::sim {

double idm_desired_gap(double v, double v_lead, const DriverProfile& p) {
  const double dv = v - v_lead;
  const double dynamic = v * p.time_headway + v * dv / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
  return p.min_gap + std::max(0.0, dynamic);
}

IdmResult idm_accel(double gap, double v, double v_lead, const DriverProfile& p) {
  const bool has_leader = std::isfinite(gap);
  if (has_leader && gap <= 0.0) return {-p.comfort_decel, true};
  const double free_term = std::pow(v / p.desired_speed, 4);
  double interaction = 0.0;
  if (has_leader) {
    const double ratio = idm_desired_gap(v, v_lead, p) / gap;
    interaction = ratio * ratio;
  }
  const double a = p.max_accel * (1.0 - free_term - interaction);
  return {std::clamp(a, -p.comfort_decel, p.max_accel), false};
}

bool mobil_accepts(const MobilInputs& in, const DriverProfile& p) {
  if (in.new_follower_after < -p.comfort_decel) return false;
  const double gain = in.accel_after - in.accel_current +
                      p.politeness * ((in.new_follower_after - in.new_follower_before) +
                                      (in.old_follower_after - in.old_follower_before));
  return gain > p.lane_change_accel_gain_threshold;
}

}  // namespace telldrive::sim
