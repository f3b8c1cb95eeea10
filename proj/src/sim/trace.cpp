#include "telldrive/sim/trace.hpp"

#include <stdexcept>

namespace telldrive::sim {

using nlohmann::json;

namespace {

ProfileKind profile_kind_from_string(const std::string& s) {
  for (auto k : {ProfileKind::Conservative, ProfileKind::Standard, ProfileKind::Aggressive})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown driver profile '" + s + "'");
}

}  // namespace

json to_json(const VehicleState& v) {
  return {{"id", v.id},
          {"x", v.position.x},
          {"y", v.position.y},
          {"heading", v.heading},
          {"speed", v.speed},
          {"lane", v.lane},
          {"target_lane", v.target_lane},
          {"target_offset", v.target_offset},
          {"target_speed", v.target_speed},
          {"steering", v.steering},
          {"length", v.length},
          {"width", v.width},
          {"profile", std::string(to_string(v.profile.name))},
          {"desired_speed", v.profile.desired_speed},
          {"time_headway", v.profile.time_headway},
          {"max_accel", v.profile.max_accel},
          {"comfort_decel", v.profile.comfort_decel},
          {"min_gap", v.profile.min_gap},
          {"politeness", v.profile.politeness},
          {"lane_change_threshold", v.profile.lane_change_accel_gain_threshold},
          {"emergency_braked", v.emergency_braked}};
}

VehicleState vehicle_from_json(const json& j) {
  VehicleState v;
  v.id = j.at("id").get<int>();
  v.position = {j.at("x").get<double>(), j.at("y").get<double>()};
  v.heading = j.at("heading").get<double>();
  v.speed = j.at("speed").get<double>();
  v.lane = j.at("lane").get<int>();
  v.target_lane = j.value("target_lane", v.lane);
  v.target_offset = j.value("target_offset", 0.0);
  v.target_speed = j.value("target_speed", v.speed);
  v.steering = j.value("steering", 0.0);
  v.length = j.value("length", 5.0);
  v.width = j.value("width", 2.0);
  auto& p = v.profile;
  p.name = profile_kind_from_string(j.value("profile", std::string("standard")));
  p.desired_speed = j.at("desired_speed").get<double>();
  // older or hand-written records may omit the IDM parameters
  p.time_headway = j.value("time_headway", p.time_headway);
  p.max_accel = j.value("max_accel", p.max_accel);
  p.comfort_decel = j.value("comfort_decel", p.comfort_decel);
  p.min_gap = j.value("min_gap", p.min_gap);
  p.politeness = j.value("politeness", p.politeness);
  p.lane_change_accel_gain_threshold = j.value("lane_change_threshold", p.lane_change_accel_gain_threshold);
  v.emergency_braked = j.value("emergency_braked", false);
  if (v.speed < 0.0) throw std::invalid_argument("vehicle speed must be >= 0");
  return v;
}

json trace_record(const ScenarioState& before, Maneuver maneuver, double reward, const EventSet& events) {
  json neighbors = json::array();
  for (std::size_t i = 1; i < before.vehicles.size(); ++i) neighbors.push_back(to_json(before.vehicles[i]));
  return {{"t", before.step_count},
          {"time", before.time},
          {"scenario", std::string(to_string(before.config.kind))},
          {"seed", before.config.seed},
          {"ego", to_json(before.ego())},
          {"neighbors", neighbors},
          {"maneuver", std::string(to_token(maneuver))},
          {"reward", reward},
          {"events", events.names()}};
}

ScenarioState state_from_trace(const json& record, const ScenarioConfig& base) {
  try {
    const auto kind = scenario_kind_from_string(record.at("scenario").get<std::string>());
    if (!kind) throw std::invalid_argument("unknown scenario '" + record.at("scenario").get<std::string>() + "'");
    ScenarioState st;
    st.config = *kind == base.kind ? base : ScenarioConfig::preset(*kind);
    st.config.seed = record.value("seed", std::uint64_t{0});
    st.road = RoadNetwork::build(*kind);
    st.step_count = record.value("t", 0);
    st.time = record.value("time", st.step_count * st.config.decision_period);
    auto ego = vehicle_from_json(record.at("ego"));
    ego.is_ego = true;
    st.vehicles.push_back(ego);
    for (const auto& n : record.at("neighbors")) st.vehicles.push_back(vehicle_from_json(n));
    for (const auto& v : st.vehicles)
      if (v.lane < 0 || static_cast<std::size_t>(v.lane) >= st.road->lanes.size())
        throw std::invalid_argument("vehicle " + std::to_string(v.id) + " on unknown lane " + std::to_string(v.lane));
    return st;
  } catch (const json::exception& e) {
    throw std::invalid_argument(e.what());
  }
}

}  // namespace telldrive::sim
