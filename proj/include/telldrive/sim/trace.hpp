#pragma once

#include <json.hpp>

#include "telldrive/sim/env.hpp"

namespace telldrive::sim {

nlohmann::json to_json(const VehicleState& v);
/// Throws std::invalid_argument (or a json exception) on a malformed record.
VehicleState vehicle_from_json(const nlohmann::json& j);

/// One episode-trace record for the decision taken in `before`:
/// {t, time, scenario, seed, ego, neighbors, maneuver, reward, events}.
nlohmann::json trace_record(const ScenarioState& before, Maneuver maneuver, double reward,
                            const EventSet& events);

/// Rebuilds the pre-decision state of a trace record on top of `base`. The
/// record's scenario kind must match `base.kind`, otherwise that kind's preset
/// is used. Throws std::invalid_argument on a malformed record.
ScenarioState state_from_trace(const nlohmann::json& record, const ScenarioConfig& base);

}  // namespace telldrive::sim
