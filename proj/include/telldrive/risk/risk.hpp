#pragma once

#include <limits>
#include <span>
#include <vector>

#include "telldrive/risk/params.hpp"
#include "telldrive/sim/env.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::risk {

/// Returned when the closest approach stays outside the conflict radius.
inline constexpr double kNoConflict = std::numeric_limits<double>::infinity();
/// 1/tau is evaluated with tau floored here, so an ongoing overlap (tau = 0)
/// yields a large finite risk instead of infinity.
inline constexpr double kMinTau = 1e-3;

struct ClosestApproach {
  double time = 0.0;      // s, clamped to [0, horizon]
  double distance = 0.0;  // m, centre distance at `time`
};

/// Constant-velocity closest approach: t* = -(dp.dv)/|dv|^2 clamped to
/// [0, horizon]; t* = 0 when dv = 0.
ClosestApproach closest_approach(const sim::VehicleState& ego, const sim::VehicleState& other,
                                 double horizon);

/// Time to conflict point: t* if the distance at t* is within the conflict
/// radius, otherwise kNoConflict.
double ttcp(const sim::VehicleState& ego, const sim::VehicleState& other, const RiskParams& params);

struct VehicleConflict {
  int vehicle_id = 0;
  double tau = kNoConflict;
  double min_distance = 0.0;
  sim::Vec2 relative_position;  // ego heading frame
  double relative_heading = 0.0;
};

struct ConflictAssessment {
  std::vector<VehicleConflict> per_vehicle;
  double tau_min = kNoConflict;
  bool risky = false;  // tau_min < horizon

  const VehicleConflict* critical() const;
};

ConflictAssessment assess(const sim::ScenarioState& state, const RiskParams& params);

/// Omega = max(1/tau, beta * 1{infraction}), with 1/inf = 0.
double omega(double tau, bool infraction, const RiskParams& params);

/// Risk of taking `maneuver` in `state`: rolls a copy of the state forward one
/// decision period and scores the resulting tau_min. Infractions are the
/// observed `events` (collision, off-road) plus any collision, off-road or
/// emergency clamp produced by the rollout.
double risk(const sim::ScenarioState& state, sim::Maneuver maneuver, const sim::EventSet& events,
            const RiskParams& params);

/// One decision step of a finished episode.
struct EpisodeStep {
  sim::ScenarioState state;
  sim::Maneuver action = sim::Maneuver::Cruise;
  sim::ScenarioState next;
  sim::EventSet events;
};

/// Inclusive index range [first, last].
struct IndexRange {
  std::size_t first = 0;
  std::size_t last = 0;
  bool operator==(const IndexRange&) const = default;
};

inline constexpr std::size_t kFlagContext = 2;

/// Maximal runs of omega >= delta, each extended by kFlagContext leading steps.
/// Ranges of neighbouring runs may overlap; they are not merged.
std::vector<IndexRange> flag_ranges(std::span<const double> omegas, double delta);

std::vector<double> episode_omegas(std::span<const EpisodeStep> episode, const RiskParams& params);
std::vector<IndexRange> flag_segments(std::span<const EpisodeStep> episode, const RiskParams& params);

/// Mean over decision steps of min(tau_min, horizon). Throws UsageError when empty.
double delta_ttcp_metric(std::span<const double> tau_mins, double horizon);

}  // namespace telldrive::risk
