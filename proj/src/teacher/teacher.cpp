#include "telldrive/teacher/teacher.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>

#include "telldrive/errors.hpp"
#include "telldrive/sim/idm.hpp"

namespace telldrive::teacher {

using nlohmann::json;

namespace {

constexpr double kAssumedLength = 5.0;  // the observation carries no vehicle size
constexpr double kMinLaneChangeGap = 2.0;
constexpr const char* kFenceOpen = "```json\n";
constexpr const char* kFenceClose = "\n```";

double ego_speed(const sim::Observation& obs) { return std::hypot(obs.ego[2], obs.ego[3]); }

json tau_json(double tau) { return std::isfinite(tau) ? json(tau) : json(nullptr); }
double tau_from_json(const json& j) { return j.is_null() ? risk::kNoConflict : j.get<double>(); }

std::string num(double v, int decimals = 2) {
  if (!std::isfinite(v)) return "inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  auto s = os.str();
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

std::string road_description(sim::ScenarioKind kind) {
  switch (kind) {
    case sim::ScenarioKind::Merge:
      return "Two-lane highway heading east (lane 0 left, lane 1 right) with a 200 m acceleration "
             "lane (lane 2) joining from the right. The acceleration lane ends; the ego must merge "
             "left into the mainline before it does.";
    case sim::ScenarioKind::Highway:
      return "Four-lane straight highway heading east, lanes 0 (leftmost) to 3 (rightmost). Leaving "
             "the outer lanes is off-road.";
    case sim::ScenarioKind::Intersection:
      return "Unsignalized crossing of two two-lane roads. The ego approaches eastbound and makes an "
             "unprotected left turn onto the northbound lane; oncoming traffic is westbound and "
             "crossing traffic southbound.";
  }
  return "";
}

/// Finds the matching close brace of the object starting at `start`, honouring strings.
std::optional<std::size_t> match_brace(const std::string& s, std::size_t start) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i;
  }
  return std::nullopt;
}

/// Well-formed JSON objects in `text`, last one first.
std::vector<json> objects_last_first(const std::string& text) {
  std::vector<json> out;
  for (std::size_t i = text.size(); i-- > 0;) {
    if (text[i] != '{') continue;
    const auto end = match_brace(text, i);
    if (!end) continue;
    auto parsed = json::parse(text.begin() + static_cast<long>(i), text.begin() + static_cast<long>(*end) + 1,
                              nullptr, false);
    if (parsed.is_object()) out.push_back(std::move(parsed));
  }
  return out;
}

std::string exemplar_line(const RetrievedEntry& r, int k) {
  const auto& e = r.entry;
  const int slots = static_cast<int>((e.z.size() - 6) / 5);
  double speed = e.z.size() >= 4 ? std::hypot(e.z[2], e.z[3]) : 0.0;
  double tau = risk::kNoConflict;
  for (int i = 0; i < slots; ++i) tau = std::min(tau, e.z[6 + 4 * static_cast<std::size_t>(slots) + i]);
  std::ostringstream os;
  os << "Example " << k << " (similarity " << num(r.similarity, 3) << "): " << sim::to_string(e.scenario_kind)
     << ", ego speed " << num(speed, 1) << " m/s, closest conflict " << num(tau) << " s -> action "
     << sim::to_token(e.action) << " -> outcome " << to_string(e.outcome) << " (return "
     << num(e.episode_return) << ")";
  if (!e.lesson.empty()) os << ". Lesson: " << e.lesson;
  return os.str();
}

}  // namespace

DecisionContext make_context(const sim::ScenarioState& state, std::vector<ConstraintRule> constraints) {
  DecisionContext c;
  c.kind = state.config.kind;
  c.desired_speed = state.ego().profile.desired_speed;
  c.goal_lane_change = sim::goal_lane_change(state);
  c.horizon = state.risk.horizon;
  c.constraints = std::move(constraints);
  return c;
}

bool lane_change_gap_safe(const sim::Observation& obs, int dir, double desired_speed) {
  if (dir == 0) return false;
  auto profile = sim::DriverProfile::make(sim::ProfileKind::Standard, desired_speed);
  profile.time_headway = kMergeHeadway;
  const double v = ego_speed(obs);
  const sim::FeatureColumn* leader = nullptr;
  const sim::FeatureColumn* follower = nullptr;
  for (int k = 0; k < obs.neighbor_count; ++k) {
    const auto& col = obs.neighbors[static_cast<std::size_t>(k)];
    const double lateral = col[1] * dir;
    if (lateral < 0.5 * sim::kLaneWidth || lateral > 1.5 * sim::kLaneWidth) continue;
    if (col[0] >= 0.0) {
      if (!leader || col[0] < (*leader)[0]) leader = &col;
    } else if (!follower || col[0] > (*follower)[0]) {
      follower = &col;
    }
  }
  if (leader) {
    const double gap = (*leader)[0] - kAssumedLength;
    if (gap <= kMinLaneChangeGap) return false;
    if (sim::idm_accel(gap, v, v + (*leader)[2], profile).accel < -kSafeLaneChangeDecel) return false;
  }
  if (follower) {
    const double gap = -(*follower)[0] - kAssumedLength;
    if (gap <= kMinLaneChangeGap) return false;
    const double vf = std::max(0.0, v + (*follower)[2]);
    if (sim::idm_accel(gap, vf, v, profile).accel < -kSafeLaneChangeDecel) return false;
  }
  return true;
}

sim::Maneuver gap_seeking(const sim::Observation& obs, int dir, double desired_speed) {
  const double v = ego_speed(obs);
  const sim::FeatureColumn* nearest = nullptr;
  for (int k = 0; k < obs.neighbor_count; ++k) {
    const auto& col = obs.neighbors[static_cast<std::size_t>(k)];
    const double lateral = col[1] * dir;
    if (lateral < 0.5 * sim::kLaneWidth || lateral > 1.5 * sim::kLaneWidth) continue;
    if (std::abs(col[0]) > kGapSeekRange) continue;
    if (!nearest || std::abs(col[0]) < std::abs((*nearest)[0])) nearest = &col;
  }
  if (nearest && (*nearest)[0] >= -kAssumedLength && v > kGapSeekMinFraction * desired_speed) {
    return sim::Maneuver::SlowDown;  // fall in behind it
  }
  return v < kGapSeekMaxFraction * desired_speed ? sim::Maneuver::SpeedUp : sim::Maneuver::Cruise;
}

sim::Maneuver scripted_decide(const sim::Observation& obs, const risk::ConflictAssessment& assessment,
                              const DecisionContext& context) {
  using sim::Maneuver;
  const double speed = ego_speed(obs);
  const double tau_min = assessment.tau_min;
  const auto* critical = assessment.critical();

  Maneuver choice = Maneuver::Cruise;
  const bool conflicting = critical && (critical->relative_position.x > 0.0 ||
                                        std::abs(critical->relative_heading) > kCrossingAngle);
  if (tau_min < kUrgentTau && conflicting) {
    choice = Maneuver::SlowDown;
  } else if (context.goal_lane_change == 0 && speed < kSlowFraction * context.desired_speed &&
             tau_min > kClearTau) {
    choice = Maneuver::SpeedUp;
  } else if (context.goal_lane_change != 0) {
    if (lane_change_gap_safe(obs, context.goal_lane_change, context.desired_speed)) {
      choice = context.goal_lane_change > 0 ? Maneuver::TurnLeft : Maneuver::TurnRight;
    } else {
      choice = gap_seeking(obs, context.goal_lane_change, context.desired_speed);
    }
  }

  if (!forbidden(context.constraints, choice, context.kind, tau_min, speed)) return choice;
  for (auto alt : {Maneuver::Cruise, Maneuver::SlowDown, Maneuver::SpeedUp, Maneuver::TurnLeft,
                   Maneuver::TurnRight}) {
    if (!forbidden(context.constraints, alt, context.kind, tau_min, speed)) return alt;
  }
  return choice;
}

int estimate_tokens(const std::string& text) { return static_cast<int>((text.size() + 3) / 4); }

Prompt build_prompt(const StateVector& state, const sim::Observation& obs,
                    const risk::ConflictAssessment& assessment,
                    const std::vector<RetrievedEntry>& retrieved, const DecisionContext& context,
                    const std::vector<std::string>& lessons) {
  (void)state;
  std::ostringstream sys;
  sys << "You are the teacher for an autonomous vehicle's high-level decision maker. Each step you "
         "choose one maneuver for the ego vehicle; a low-level controller executes it for 1 second.\n"
      << "Maneuvers: slow_down (target speed -2 m/s), cruise (hold target speed and lane), speed_up "
         "(target speed +2 m/s), turn_left (change one lane left), turn_right (change one lane right).\n"
      << "Heuristics: tau is the time until a vehicle's constant-velocity closest approach comes "
         "within 4 m of the ego; below 2 s is urgent. Prefer keeping a safe headway, avoid lane "
         "changes into small gaps, never leave the road, and keep close to the desired speed.\n";
  const auto& rules = context.constraints;
  if (!rules.empty()) {
    sys << "Hard constraints learned from past failures:\n";
    for (const auto& r : rules) sys << "- " << r.describe() << "\n";
  }
  sys << "Think step by step: (1) how severe a collision with each nearby vehicle could be, (2) the "
         "short- and long-term consequences of each maneuver, (3) the effect on surrounding traffic. "
         "Then end your reply with one line holding a JSON object {\"action\": <maneuver>, "
         "\"reason\": <short text>}.";

  std::vector<std::string> kept_lessons = lessons;
  const double speed = ego_speed(obs);
  const auto* critical = assessment.critical();

  auto render = [&](int listed) {
    Prompt p;
    json neighbors = json::array();
    std::ostringstream user;
    user << "Scenario: " << sim::to_string(context.kind) << ". " << road_description(context.kind) << "\n";
    user << "Ego: position (" << num(obs.ego[0], 1) << ", " << num(obs.ego[1], 1) << ") m, speed "
         << num(speed, 1) << " m/s, heading " << num(std::atan2(obs.ego[5], obs.ego[4]), 3)
         << " rad, desired speed " << num(context.desired_speed, 1) << " m/s.";
    if (context.goal_lane_change != 0) {
      user << " The route requires a lane change to the " << (context.goal_lane_change > 0 ? "left" : "right") << ".";
    }
    user << "\nNearby vehicles (ego frame: x ahead, y left):\n";
    for (int k = 0; k < listed; ++k) {
      const auto& col = obs.neighbors[static_cast<std::size_t>(k)];
      const double tau = column_tau(obs, assessment, k);
      const int id = obs.neighbor_ids[static_cast<std::size_t>(k)];
      const double rel_heading = std::atan2(col[5], col[4]) - std::atan2(obs.ego[5], obs.ego[4]);
      user << "- vehicle " << id << ": x " << num(col[0], 1) << " m, y " << num(col[1], 1)
           << " m, relative velocity (" << num(col[2], 1) << ", " << num(col[3], 1) << ") m/s, tau "
           << num(tau) << " s\n";
      neighbors.push_back({{"id", id}, {"dx", col[0]}, {"dy", col[1]}, {"dvx", col[2]}, {"dvy", col[3]},
                           {"cos", col[4]}, {"sin", col[5]}, {"relative_heading", sim::wrap_angle(rel_heading)},
                           {"tau", tau_json(tau)}});
    }
    if (listed == 0) user << "- none listed\n";
    user << "Risk summary: tau_min = " << num(assessment.tau_min) << " s";
    if (critical) user << " (vehicle " << critical->vehicle_id << ")";
    user << ".\n";
    if (!kept_lessons.empty()) {
      user << "Lessons from reflection:\n";
      for (const auto& l : kept_lessons) user << "- " << l << "\n";
    }
    if (!retrieved.empty()) {
      user << "Similar past situations:\n";
      int k = 1;
      for (const auto& r : retrieved) user << exemplar_line(r, k++) << "\n";
    }
    json constraints = json::array();
    for (const auto& r : rules) constraints.push_back(to_json(r));
    json crit = nullptr;
    if (critical) {
      crit = {{"id", critical->vehicle_id}, {"dx", critical->relative_position.x},
              {"dy", critical->relative_position.y}, {"relative_heading", critical->relative_heading},
              {"tau", tau_json(critical->tau)}};
    }
    p.data = {{"kind", "decision"},
              {"scenario", std::string(sim::to_string(context.kind))},
              {"desired_speed", context.desired_speed},
              {"goal_lane_change", context.goal_lane_change},
              {"horizon", context.horizon},
              {"ego", {{"x", obs.ego[0]}, {"y", obs.ego[1]}, {"vx", obs.ego[2]}, {"vy", obs.ego[3]},
                       {"cos", obs.ego[4]}, {"sin", obs.ego[5]}}},
              {"slots", obs.slots()},
              {"tau_min", tau_json(assessment.tau_min)},
              {"critical", crit},
              {"neighbors", neighbors},
              {"constraints", constraints}};
    user << "Data:\n" << kFenceOpen << p.data.dump() << kFenceClose;
    p.messages = {{"system", sys.str()}, {"user", user.str()}};
    p.estimated_tokens = estimate_tokens(p.messages[0].content) + estimate_tokens(p.messages[1].content);
    p.vehicles_listed = listed;
    return p;
  };

  int listed = obs.neighbor_count;
  Prompt p = render(listed);
  while (p.estimated_tokens > kMaxPromptTokens && (listed > 0 || !kept_lessons.empty())) {
    if (listed > 0) --listed;  // farthest vehicle first
    else kept_lessons.erase(kept_lessons.begin());
    p = render(listed);
  }
  return p;
}

std::optional<json> extract_data_block(const std::string& text) {
  const auto open = text.rfind(kFenceOpen);
  if (open == std::string::npos) return std::nullopt;
  const auto start = open + std::string(kFenceOpen).size();
  const auto close = text.find(kFenceClose, start);
  if (close == std::string::npos) return std::nullopt;
  auto parsed = json::parse(text.substr(start, close - start), nullptr, false);
  if (parsed.is_discarded()) return std::nullopt;
  return parsed;
}

sim::Maneuver scripted_decide_from_data(const json& data) {
  sim::Observation obs;
  const auto& ego = data.at("ego");
  obs.ego = {ego.at("x").get<double>(), ego.at("y").get<double>(), ego.at("vx").get<double>(),
             ego.at("vy").get<double>(), ego.at("cos").get<double>(), ego.at("sin").get<double>()};
  obs.neighbors.assign(data.at("slots").get<std::size_t>(), sim::FeatureColumn{});
  for (const auto& n : data.at("neighbors")) {
    const auto k = static_cast<std::size_t>(obs.neighbor_count++);
    obs.neighbors.at(k) = {n.at("dx").get<double>(), n.at("dy").get<double>(), n.at("dvx").get<double>(),
                           n.at("dvy").get<double>(), n.at("cos").get<double>(), n.at("sin").get<double>()};
    obs.neighbor_ids.push_back(n.at("id").get<int>());
  }
  risk::ConflictAssessment assessment;
  assessment.tau_min = tau_from_json(data.at("tau_min"));
  if (const auto& c = data.at("critical"); !c.is_null()) {
    risk::VehicleConflict v;
    v.vehicle_id = c.at("id").get<int>();
    v.tau = tau_from_json(c.at("tau"));
    v.relative_position = {c.at("dx").get<double>(), c.at("dy").get<double>()};
    v.relative_heading = c.at("relative_heading").get<double>();
    assessment.per_vehicle.push_back(v);
  }
  DecisionContext context;
  auto kind = sim::scenario_kind_from_string(data.at("scenario").get<std::string>());
  if (!kind) throw std::invalid_argument("unknown scenario in data block");
  context.kind = *kind;
  context.desired_speed = data.at("desired_speed").get<double>();
  context.goal_lane_change = data.at("goal_lane_change").get<int>();
  context.horizon = data.at("horizon").get<double>();
  for (const auto& c : data.at("constraints")) context.constraints.push_back(constraint_from_json(c));
  return scripted_decide(obs, assessment, context);
}

std::string_view to_string(DecisionSource s) {
  switch (s) {
    case DecisionSource::Llm: return "llm";
    case DecisionSource::Scripted: return "scripted";
    case DecisionSource::Fallback: return "fallback";
  }
  return "fallback";
}

std::optional<std::pair<sim::Maneuver, std::string>> parse_decision(const std::string& reply) {
  // Scan object starts from the back; the first object that carries a valid
  // action is the last well-formed decision in the reply.
  for (std::size_t i = reply.size(); i-- > 0;) {
    if (reply[i] != '{') continue;
    const auto end = match_brace(reply, i);
    if (!end) continue;
    const auto parsed = json::parse(reply.begin() + static_cast<long>(i),
                                    reply.begin() + static_cast<long>(*end) + 1, nullptr, false);
    if (!parsed.is_object() || !parsed.contains("action") || !parsed["action"].is_string()) continue;
    const auto action = sim::maneuver_from_token(parsed["action"].get<std::string>());
    if (!action) return std::nullopt;  // the final decision names no valid maneuver
    std::string reason;
    if (parsed.contains("reason") && parsed["reason"].is_string()) reason = parsed["reason"].get<std::string>();
    return std::make_pair(*action, reason);
  }
  return std::nullopt;
}

TeacherDecision decide(const Prompt& prompt, ChatBackend& backend, sim::Maneuver fallback_action,
                       const DecideOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  TeacherDecision out;
  ChatRequest request{prompt.messages, options.temperature, options.max_tokens};
  std::string last_problem = "no attempt made";
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    ++out.attempts;
    try {
      const auto reply = backend.chat(request);
      if (auto parsed = parse_decision(reply)) {
        out.action = parsed->first;
        out.rationale = parsed->second;
        out.source = backend.name() == "scripted" ? DecisionSource::Scripted : DecisionSource::Llm;
        out.latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
      }
      last_problem = "reply held no valid decision object";
    } catch (const BackendError& e) {
      last_problem = e.what();
      break;  // transport failures and timeouts are not retried
    } catch (const std::exception& e) {
      last_problem = e.what();
    }
  }
  out.action = fallback_action;
  out.rationale = "fallback to scripted rules: " + last_problem;
  out.source = DecisionSource::Fallback;
  out.latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------- reflection

ConstraintRule canonical_rule(const ReflectionInput& input) {
  const FlaggedStep* worst = nullptr;
  for (const auto& seg : input.segments)
    for (const auto& s : seg)
      if (!worst || s.omega > worst->omega) worst = &s;
  if (!worst) throw UsageError("canonical_rule: no flagged steps");
  double threshold = worst->tau_min;
  if (!std::isfinite(threshold)) threshold = input.horizon;
  if (threshold <= 0.0) threshold = kMinGuardTau;
  ConstraintRule rule;
  rule.scenario_kind = input.kind;
  rule.forbidden_action = worst->action;
  rule.guard.push_back({GuardField::TauMin, Comparison::Less, threshold});
  return rule;
}

std::vector<ChatMessage> build_reflection_prompt(const ReflectionInput& input) {
  std::ostringstream sys;
  sys << "You are the reflective evaluator of an autonomous-driving teacher. You receive the risky "
         "segments of a finished episode, each step with the maneuver taken, the time to conflict "
         "tau_min before it and the risk score Omega (1/tau, or a fixed penalty on infractions). "
         "Explain what went wrong, then end your reply with one line holding a JSON object "
         "{\"policy_delta\": <advice for future decisions>, \"prompt_delta\": <text to add to future "
         "prompts>, \"constraints\": [{\"scenario\": <intersection|merge|highway>, \"forbidden_action\": "
         "<maneuver>, \"guard\": [{\"field\": <tau_min|ego_speed>, \"op\": <\"<\"|\">\">, "
         "\"threshold\": <number>}]}]}.";
  std::ostringstream user;
  user << "Scenario: " << sim::to_string(input.kind) << ". Episode ended with: ";
  for (std::size_t i = 0; i < input.events.size(); ++i) user << (i ? ", " : "") << input.events[i];
  if (input.events.empty()) user << "no terminal event";
  user << ".\n";
  json segments = json::array();
  int n = 1;
  for (const auto& seg : input.segments) {
    user << "Segment " << n++ << ":\n";
    json steps = json::array();
    for (const auto& s : seg) {
      user << "- step " << s.index << ": " << sim::to_token(s.action) << ", tau_min " << num(s.tau_min)
           << " s, speed " << num(s.ego_speed, 1) << " m/s, Omega " << num(s.omega) << "\n";
      steps.push_back({{"index", s.index}, {"action", std::string(sim::to_token(s.action))},
                       {"tau_min", tau_json(s.tau_min)}, {"omega", s.omega}, {"ego_speed", s.ego_speed}});
    }
    segments.push_back(steps);
  }
  const json data = {{"kind", "reflection"},
                     {"scenario", std::string(sim::to_string(input.kind))},
                     {"horizon", input.horizon},
                     {"events", input.events},
                     {"segments", segments}};
  user << "Data:\n" << kFenceOpen << data.dump() << kFenceClose;
  return {{"system", sys.str()}, {"user", user.str()}};
}

ReflectionInput reflection_input_from_data(const json& data) {
  ReflectionInput in;
  auto kind = sim::scenario_kind_from_string(data.at("scenario").get<std::string>());
  if (!kind) throw std::invalid_argument("unknown scenario in data block");
  in.kind = *kind;
  in.horizon = data.at("horizon").get<double>();
  in.events = data.at("events").get<std::vector<std::string>>();
  for (const auto& seg : data.at("segments")) {
    std::vector<FlaggedStep> steps;
    for (const auto& s : seg) {
      FlaggedStep f;
      f.index = s.at("index").get<std::size_t>();
      auto action = sim::maneuver_from_token(s.at("action").get<std::string>());
      if (!action) throw std::invalid_argument("unknown action in data block");
      f.action = *action;
      f.tau_min = tau_from_json(s.at("tau_min"));
      f.omega = s.at("omega").get<double>();
      f.ego_speed = s.at("ego_speed").get<double>();
      steps.push_back(f);
    }
    in.segments.push_back(std::move(steps));
  }
  return in;
}

ReflectionOutcome parse_reflection(const std::string& reply) {
  ReflectionOutcome out;
  out.ok = true;
  const auto objects = objects_last_first(reply);
  const json* chosen = nullptr;
  for (const auto& o : objects) {
    if (o.contains("policy_delta") || o.contains("prompt_delta") || o.contains("constraints")) {
      chosen = &o;
      break;
    }
  }
  if (chosen) {
    if (chosen->contains("policy_delta") && (*chosen)["policy_delta"].is_string())
      out.policy_delta = (*chosen)["policy_delta"].get<std::string>();
    if (chosen->contains("prompt_delta") && (*chosen)["prompt_delta"].is_string())
      out.prompt_delta = (*chosen)["prompt_delta"].get<std::string>();
    if (chosen->contains("constraints")) {
      const auto& list = (*chosen)["constraints"];
      if (!list.is_array()) {
        std::cerr << "warning: reflection constraints are not a list; dropped\n";
      } else {
        for (const auto& c : list) {
          try {
            out.constraint_delta.push_back(constraint_from_json(c));
          } catch (const std::exception& e) {
            std::cerr << "warning: dropped invalid reflection constraint " << c.dump() << ": " << e.what() << "\n";
          }
        }
      }
    }
    return out;
  }
  // The reply object is not valid JSON as a whole (typically a broken
  // constraint block); salvage the text deltas field by field.
  static const std::regex field(R"re("(policy_delta|prompt_delta)"\s*:\s*("(?:[^"\\]|\\.)*"))re");
  for (std::sregex_iterator it(reply.begin(), reply.end(), field), end; it != end; ++it) {
    const auto value = json::parse((*it)[2].str(), nullptr, false);
    if (!value.is_string()) continue;
    ((*it)[1] == "policy_delta" ? out.policy_delta : out.prompt_delta) = value.get<std::string>();
  }
  if (reply.find("\"constraints\"") != std::string::npos) {
    std::cerr << "warning: reflection constraint block is malformed; dropped\n";
  }
  return out;
}

ReflectionOutcome reflect(const ReflectionInput& input, ChatBackend& backend, const DecideOptions& options) {
  if (input.segments.empty()) throw UsageError("reflect: called without flagged segments");
  try {
    const auto reply = backend.chat({build_reflection_prompt(input), options.temperature, options.max_tokens});
    return parse_reflection(reply);
  } catch (const std::exception& e) {
    std::cerr << "warning: reflection skipped: " << e.what() << "\n";
    return {};
  }
}

// ---------------------------------------------------------------- orchestrator

Teacher::Teacher(std::unique_ptr<ChatBackend> backend, MemoryRepository memory, TeacherOptions options)
    : backend_(std::move(backend)), memory_(std::move(memory)), options_(std::move(options)) {
  if (!backend_) throw UsageError("Teacher requires a backend");
  if (options_.n_shot < 0) throw ConfigError("teacher.n_shot", "must be >= 0");
}

Prompt Teacher::prompt_for(const sim::ScenarioState& state, const sim::Observation& obs) const {
  const auto assessment = risk::assess(state, options_.risk);
  const auto z = encode_state(obs, assessment, options_.risk.horizon);
  std::vector<RetrievedEntry> shots;
  if (options_.n_shot > 0 && memory_.size() > 0) {
    for (const auto& r : retrieve(z.z, memory_, static_cast<std::size_t>(options_.n_shot)))
      shots.push_back({memory_.at(r.index), r.similarity});
  }
  std::vector<std::string> lessons;
  for (const auto& e : memory_.entries())
    if (!e.lesson.empty()) lessons.push_back(e.lesson);
  return build_prompt(z, obs, assessment, shots, make_context(state, memory_.active_constraints()), lessons);
}

TeacherDecision Teacher::decide_step(const sim::ScenarioState& state, const sim::Observation& obs) {
  ++queries_;
  const auto assessment = risk::assess(state, options_.risk);
  const auto fallback = scripted_decide(obs, assessment, make_context(state, memory_.active_constraints()));
  return decide(prompt_for(state, obs), *backend_, fallback, options_.decide);
}

std::optional<ReflectionOutcome> Teacher::end_episode(const std::vector<risk::EpisodeStep>& episode,
                                                      double episode_return, const sim::EventSet& events) {
  if (episode.empty()) return std::nullopt;
  const auto omegas = risk::episode_omegas(episode, options_.risk);
  const auto worst = static_cast<std::size_t>(std::max_element(omegas.begin(), omegas.end()) - omegas.begin());
  const auto& ws = episode[worst].state;
  const auto obs = sim::observe(ws);

  MemoryEntry entry;
  entry.z = encode_state(obs, risk::assess(ws, options_.risk), options_.risk.horizon).z;
  entry.scenario_kind = ws.config.kind;
  entry.action = episode[worst].action;
  entry.outcome = events.has(sim::Event::Success)     ? Outcome::Success
                  : events.has(sim::Event::Collision) ? Outcome::Collision
                                                      : Outcome::Other;
  entry.episode_return = episode_return;
  memory_.insert(entry);

  const auto ranges = risk::flag_ranges(omegas, options_.risk.delta);
  if (ranges.empty()) return std::nullopt;

  ReflectionInput input;
  input.kind = ws.config.kind;
  input.horizon = options_.risk.horizon;
  input.events = events.names();
  for (const auto& r : ranges) {
    std::vector<FlaggedStep> seg;
    for (std::size_t i = r.first; i <= r.last; ++i) {
      const auto& s = episode[i];
      seg.push_back({i, s.action, risk::assess(s.state, options_.risk).tau_min, omegas[i], s.state.ego().speed});
    }
    input.segments.push_back(std::move(seg));
  }
  auto outcome = reflect(input, *backend_, options_.decide);
  ++reflections_;

  std::string lesson = outcome.policy_delta;
  if (!outcome.prompt_delta.empty()) lesson += (lesson.empty() ? "" : " ") + outcome.prompt_delta;
  if (!lesson.empty() || !outcome.constraint_delta.empty()) {
    MemoryEntry lesson_entry = entry;
    lesson_entry.lesson = lesson;
    lesson_entry.constraints = outcome.constraint_delta;
    memory_.insert(std::move(lesson_entry));
  }
  return outcome;
}

}  // namespace telldrive::teacher
