#include "telldrive/risk/risk.hpp"

#include <algorithm>
#include <cmath>

#include "telldrive/errors.hpp"

namespace telldrive::risk {

void RiskParams::validate() const {
  if (!(beta > 0.0)) throw ConfigError("risk.beta", "must be > 0");
  if (!(delta > 0.0)) throw ConfigError("risk.delta", "must be > 0");
  if (!(conflict_radius > 0.0)) throw ConfigError("risk.conflict_radius", "must be > 0");
  if (!(horizon > 0.0)) throw ConfigError("risk.horizon", "must be > 0");
}

ClosestApproach closest_approach(const sim::VehicleState& ego, const sim::VehicleState& other,
                                 double horizon) {
  const sim::Vec2 dp = other.position - ego.position;
  const sim::Vec2 dv = other.velocity() - ego.velocity();
  const double dv2 = sim::dot(dv, dv);
  double t = 0.0;
  if (dv2 > 0.0) t = std::clamp(-sim::dot(dp, dv) / dv2, 0.0, horizon);
  return {t, sim::norm(dp + dv * t)};
}

double ttcp(const sim::VehicleState& ego, const sim::VehicleState& other, const RiskParams& params) {
  const auto ca = closest_approach(ego, other, params.horizon);
  return ca.distance <= params.conflict_radius ? ca.time : kNoConflict;
}

const VehicleConflict* ConflictAssessment::critical() const {
  const VehicleConflict* best = nullptr;
  for (const auto& c : per_vehicle)
    if (std::isfinite(c.tau) && (!best || c.tau < best->tau)) best = &c;
  return best;
}

ConflictAssessment assess(const sim::ScenarioState& state, const RiskParams& params) {
  ConflictAssessment out;
  const auto& ego = state.ego();
  for (std::size_t i = 1; i < state.vehicles.size(); ++i) {
    const auto& other = state.vehicles[i];
    const auto ca = closest_approach(ego, other, params.horizon);
    VehicleConflict c;
    c.vehicle_id = other.id;
    c.min_distance = ca.distance;
    c.tau = ca.distance <= params.conflict_radius ? ca.time : kNoConflict;
    c.relative_position = sim::rotate_into(other.position - ego.position, ego.heading);
    c.relative_heading = sim::wrap_angle(other.heading - ego.heading);
    out.tau_min = std::min(out.tau_min, c.tau);
    out.per_vehicle.push_back(c);
  }
  out.risky = out.tau_min < params.horizon;
  return out;
}

double omega(double tau, bool infraction, const RiskParams& params) {
  const double inverse = std::isfinite(tau) ? 1.0 / std::max(tau, kMinTau) : 0.0;
  return std::max(inverse, infraction ? params.beta : 0.0);
}

double risk(const sim::ScenarioState& state, sim::Maneuver maneuver, const sim::EventSet& events,
            const RiskParams& params) {
  bool infraction = events.has(sim::Event::Collision) || events.has(sim::Event::OffRoad);
  double tau = kNoConflict;
  if (!state.terminal) {
    auto rollout = state;
    const auto outcome = sim::step(rollout, maneuver);
    infraction = infraction || outcome.events.has(sim::Event::Collision) ||
                 outcome.events.has(sim::Event::OffRoad) || outcome.info.emergency_clamp;
    tau = assess(rollout, params).tau_min;
  }
  return omega(tau, infraction, params);
}

std::vector<IndexRange> flag_ranges(std::span<const double> omegas, double delta) {
  std::vector<IndexRange> out;
  std::size_t i = 0;
  while (i < omegas.size()) {
    if (omegas[i] < delta) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < omegas.size() && omegas[j + 1] >= delta) ++j;
    out.push_back({i >= kFlagContext ? i - kFlagContext : 0, j});
    i = j + 1;
  }
  return out;
}

std::vector<double> episode_omegas(std::span<const EpisodeStep> episode, const RiskParams& params) {
  std::vector<double> out;
  out.reserve(episode.size());
  for (const auto& s : episode) out.push_back(risk(s.state, s.action, s.events, params));
  return out;
}

std::vector<IndexRange> flag_segments(std::span<const EpisodeStep> episode, const RiskParams& params) {
  const auto omegas = episode_omegas(episode, params);
  return flag_ranges(omegas, params.delta);
}

double delta_ttcp_metric(std::span<const double> tau_mins, double horizon) {
  if (tau_mins.empty()) throw UsageError("delta_ttcp_metric: episode has no decision steps");
  double total = 0.0;
  for (double t : tau_mins) total += std::min(t, horizon);
  return total / static_cast<double>(tau_mins.size());
}

}  // namespace telldrive::risk
