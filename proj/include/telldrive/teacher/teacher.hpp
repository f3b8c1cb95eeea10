#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "telldrive/risk/risk.hpp"
#include "telldrive/sim/env.hpp"
#include "telldrive/teacher/backend.hpp"
#include "telldrive/teacher/memory.hpp"
#include "telldrive/teacher/state_vector.hpp"

namespace telldrive::teacher {

/// Scenario facts the scripted rules need beyond the observation.
struct DecisionContext {
  sim::ScenarioKind kind = sim::ScenarioKind::Merge;
  double desired_speed = 25.0;
  int goal_lane_change = 0;  // +1 left, -1 right, 0 none
  double horizon = 6.0;      // risk horizon, s
  std::vector<ConstraintRule> constraints;
};

DecisionContext make_context(const sim::ScenarioState& state, std::vector<ConstraintRule> constraints);

// Scripted rule thresholds.
inline constexpr double kUrgentTau = 2.0;        // s
inline constexpr double kClearTau = 4.0;         // s
inline constexpr double kSlowFraction = 0.8;     // of desired speed
inline constexpr double kCrossingAngle = 0.5235987755982988;  // 30 deg
inline constexpr double kSafeLaneChangeDecel = 2.5;  // m/s^2
inline constexpr double kMergeHeadway = 1.0;    // s, headway accepted when judging a merge gap
inline constexpr double kGapSeekRange = 40.0;    // m, target-lane vehicles that block a merge
inline constexpr double kGapSeekMinFraction = 0.6;  // never drop back below this share of desired speed
inline constexpr double kGapSeekMaxFraction = 1.2;  // nor speed up past this share

/// Rule cascade: urgent conflict ahead/crossing -> SlowDown; slow with clear
/// road and no pending lane change -> SpeedUp; goal lane change with a safe gap
/// -> TurnLeft/TurnRight, without one -> gap_seeking; otherwise Cruise. An action forbidden by an active constraint is replaced
/// by the first allowed action of Cruise, SlowDown, SpeedUp, TurnLeft, TurnRight.
sim::Maneuver scripted_decide(const sim::Observation& obs, const risk::ConflictAssessment& assessment,
                              const DecisionContext& context);

/// Blocked merge: the nearest target-lane vehicle within kGapSeekRange decides.
/// Ahead or alongside: drop back behind it. Behind: speed up to pass in front.
sim::Maneuver gap_seeking(const sim::Observation& obs, int dir, double desired_speed);

/// True when the adjacent lane in direction `dir` has an IDM-safe gap for the ego.
bool lane_change_gap_safe(const sim::Observation& obs, int dir, double desired_speed);

struct RetrievedEntry {
  MemoryEntry entry;
  double similarity = 0.0;
};

inline constexpr int kDefaultShots = 3;
inline constexpr int kMaxPromptTokens = 4000;

struct Prompt {
  std::vector<ChatMessage> messages;  // system, user
  nlohmann::json data;                // the embedded data block
  int estimated_tokens = 0;
  int vehicles_listed = 0;
};

/// Rough token count used for the prompt budget: ceil(chars / 4).
int estimate_tokens(const std::string& text);

/// Decision prompt. `retrieved` is rendered in the given order as exemplars;
/// vehicles are dropped farthest-first until the prompt fits kMaxPromptTokens.
Prompt build_prompt(const StateVector& state, const sim::Observation& obs,
                    const risk::ConflictAssessment& assessment,
                    const std::vector<RetrievedEntry>& retrieved, const DecisionContext& context,
                    const std::vector<std::string>& lessons = {});

enum class DecisionSource { Llm, Scripted, Fallback };
std::string_view to_string(DecisionSource s);

struct TeacherDecision {
  sim::Maneuver action = sim::Maneuver::Cruise;
  std::string rationale;
  DecisionSource source = DecisionSource::Fallback;
  double latency = 0.0;  // s
  int attempts = 0;
};

struct DecideOptions {
  int max_retries = 2;
  double temperature = 0.0;
  int max_tokens = 512;
};

/// Last well-formed {"action": <token>, ...} object in `reply`.
std::optional<std::pair<sim::Maneuver, std::string>> parse_decision(const std::string& reply);

/// Queries the backend (1 + max_retries attempts). Never throws: backend
/// errors and unparseable replies end in `fallback_action` with source Fallback.
TeacherDecision decide(const Prompt& prompt, ChatBackend& backend, sim::Maneuver fallback_action,
                       const DecideOptions& options = {});

struct FlaggedStep {
  std::size_t index = 0;
  sim::Maneuver action = sim::Maneuver::Cruise;
  double tau_min = risk::kNoConflict;  // before the action
  double omega = 0.0;
  double ego_speed = 0.0;
};

struct ReflectionInput {
  sim::ScenarioKind kind = sim::ScenarioKind::Merge;
  double horizon = 6.0;
  std::vector<std::string> events;  // terminal events of the episode
  std::vector<std::vector<FlaggedStep>> segments;
};

struct ReflectionOutcome {
  std::string policy_delta;
  std::string prompt_delta;
  std::vector<ConstraintRule> constraint_delta;
  bool ok = false;  // false when the backend failed
};

/// Fallback threshold when the flagged step had no finite or positive tau.
inline constexpr double kMinGuardTau = 0.5;

std::vector<ChatMessage> build_reflection_prompt(const ReflectionInput& input);
/// Parses deltas; invalid constraints are dropped (with a warning on stderr)
/// while the text deltas are kept.
ReflectionOutcome parse_reflection(const std::string& reply);
/// Best effort: backend failure gives empty deltas. Caller must only invoke
/// it with at least one flagged segment.
ReflectionOutcome reflect(const ReflectionInput& input, ChatBackend& backend,
                          const DecideOptions& options = {});

/// The scripted backend's canonical rule: forbid the action at the highest-Omega
/// step whenever tau_min falls below the tau observed there.
ConstraintRule canonical_rule(const ReflectionInput& input);

/// Parses the ```json fenced data block that prompts embed.
std::optional<nlohmann::json> extract_data_block(const std::string& text);
/// Scripted answer to a decision data block (the scripted backend's core).
sim::Maneuver scripted_decide_from_data(const nlohmann::json& data);
ReflectionInput reflection_input_from_data(const nlohmann::json& data);

struct TeacherOptions {
  int n_shot = kDefaultShots;
  DecideOptions decide;
  risk::RiskParams risk;
};

/// One decision step remembered for end-of-episode reflection.
struct TeacherStep {
  risk::EpisodeStep step;
  StateVector z;
  double tau_min = risk::kNoConflict;
};

/// Algorithm loop around one backend and one memory: encode, retrieve, prompt,
/// decide per step; store, flag and reflect per episode.
class Teacher {
 public:
  Teacher(std::unique_ptr<ChatBackend> backend, MemoryRepository memory, TeacherOptions options);

  /// Counts as one teacher query.
  TeacherDecision decide_step(const sim::ScenarioState& state, const sim::Observation& obs);
  /// Returns the prompt decide_step would send, without querying.
  Prompt prompt_for(const sim::ScenarioState& state, const sim::Observation& obs) const;

  /// Stores the episode in memory and reflects on flagged segments.
  /// Returns the reflection outcome when reflection ran.
  std::optional<ReflectionOutcome> end_episode(const std::vector<risk::EpisodeStep>& episode,
                                               double episode_return, const sim::EventSet& events);

  std::size_t query_count() const { return queries_; }
  std::size_t reflection_count() const { return reflections_; }
  const MemoryRepository& memory() const { return memory_; }
  MemoryRepository& memory() { return memory_; }
  ChatBackend& backend() { return *backend_; }
  const TeacherOptions& options() const { return options_; }

 private:
  std::unique_ptr<ChatBackend> backend_;
  MemoryRepository memory_;
  TeacherOptions options_;
  std::size_t queries_ = 0;
  std::size_t reflections_ = 0;
};

}  // namespace telldrive::teacher
