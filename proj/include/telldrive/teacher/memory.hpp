#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "telldrive/sim/types.hpp"

namespace telldrive::teacher {

enum class GuardField { TauMin, EgoSpeed };
enum class Comparison { Less, Greater };

/// One comparison `field op threshold`.
struct GuardTerm {
  GuardField field = GuardField::TauMin;
  Comparison op = Comparison::Less;
  double threshold = 0.0;

  bool holds(double tau_min, double ego_speed) const;
  bool operator==(const GuardTerm&) const = default;
};

/// Forbids `forbidden_action` in `scenario_kind` whenever every guard term holds.
struct ConstraintRule {
  sim::ScenarioKind scenario_kind = sim::ScenarioKind::Merge;
  sim::Maneuver forbidden_action = sim::Maneuver::Cruise;
  std::vector<GuardTerm> guard;

  bool applies(sim::ScenarioKind kind, double tau_min, double ego_speed) const;
  std::string describe() const;
  bool operator==(const ConstraintRule&) const = default;
};

/// True when `a` is forbidden by any rule in `rules` for this context.
bool forbidden(const std::vector<ConstraintRule>& rules, sim::Maneuver a, sim::ScenarioKind kind,
               double tau_min, double ego_speed);

enum class Outcome { Success, Collision, Other };
std::string_view to_string(Outcome o);

inline constexpr std::size_t kMaxLessonChars = 2000;

struct MemoryEntry {
  std::vector<double> z;
  sim::ScenarioKind scenario_kind = sim::ScenarioKind::Merge;
  sim::Maneuver action = sim::Maneuver::Cruise;
  Outcome outcome = Outcome::Other;
  double episode_return = 0.0;
  std::string lesson;  // truncated to kMaxLessonChars on insert
  std::vector<ConstraintRule> constraints;

  bool is_lesson() const { return !lesson.empty() || !constraints.empty(); }
};

struct Retrieved {
  std::size_t index = 0;  // position in the repository
  double similarity = 0.0;
};

/// Cosine similarity; 0 when either vector has zero norm.
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

inline constexpr std::size_t kDefaultMemoryCapacity = 20;
inline constexpr int kMemorySchemaVersion = 1;

class MemoryRepository {
 public:
  explicit MemoryRepository(std::size_t capacity = kDefaultMemoryCapacity);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  const MemoryEntry& at(std::size_t i) const { return entries_.at(i); }

  /// Appends; when full, first evicts the non-lesson entry with the lowest
  /// |return| (oldest on ties), or the oldest entry if all are lessons.
  void insert(MemoryEntry entry);

  /// Union of constraints held by all entries, without duplicates.
  std::vector<ConstraintRule> active_constraints() const;

  nlohmann::json to_json() const;
  static MemoryRepository from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static MemoryRepository load(const std::filesystem::path& path);

 private:
  std::size_t capacity_;
  std::vector<MemoryEntry> entries_;  // oldest first
};

/// Top-k entries by cosine similarity to z, descending; ties go to the most
/// recently inserted entry.
std::vector<Retrieved> retrieve(const std::vector<double>& z, const MemoryRepository& memory,
                                std::size_t k);

nlohmann::json to_json(const ConstraintRule& rule);
/// Throws std::invalid_argument on schema violations.
ConstraintRule constraint_from_json(const nlohmann::json& j);

}  // namespace telldrive::teacher
