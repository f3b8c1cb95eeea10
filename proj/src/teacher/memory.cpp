#include "telldrive/teacher/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "telldrive/errors.hpp"

namespace telldrive::teacher {

using nlohmann::json;

bool GuardTerm::holds(double tau_min, double ego_speed) const {
  const double value = field == GuardField::TauMin ? tau_min : ego_speed;
  return op == Comparison::Less ? value < threshold : value > threshold;
}

bool ConstraintRule::applies(sim::ScenarioKind kind, double tau_min, double ego_speed) const {
  if (kind != scenario_kind) return false;
  return std::all_of(guard.begin(), guard.end(),
                     [&](const GuardTerm& g) { return g.holds(tau_min, ego_speed); });
}

std::string ConstraintRule::describe() const {
  std::ostringstream os;
  os << "In " << sim::to_string(scenario_kind) << ", never choose " << sim::to_token(forbidden_action);
  for (std::size_t i = 0; i < guard.size(); ++i) {
    os << (i == 0 ? " when " : " and ");
    os << (guard[i].field == GuardField::TauMin ? "tau_min" : "ego_speed")
       << (guard[i].op == Comparison::Less ? " < " : " > ") << guard[i].threshold;
  }
  return os.str();
}

bool forbidden(const std::vector<ConstraintRule>& rules, sim::Maneuver a, sim::ScenarioKind kind,
               double tau_min, double ego_speed) {
  return std::any_of(rules.begin(), rules.end(), [&](const ConstraintRule& r) {
    return r.forbidden_action == a && r.applies(kind, tau_min, ego_speed);
  });
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "success";
    case Outcome::Collision: return "collision";
    case Outcome::Other: return "other";
  }
  return "other";
}

namespace {

Outcome outcome_from_string(const std::string& s) {
  if (s == "success") return Outcome::Success;
  if (s == "collision") return Outcome::Collision;
  if (s == "other") return Outcome::Other;
  throw std::invalid_argument("unknown outcome '" + s + "'");
}

sim::ScenarioKind kind_from_json(const json& j) {
  auto kind = sim::scenario_kind_from_string(j.get<std::string>());
  if (!kind) throw std::invalid_argument("unknown scenario kind " + j.dump());
  return *kind;
}

sim::Maneuver action_from_json(const json& j) {
  auto m = sim::maneuver_from_token(j.get<std::string>());
  if (!m) throw std::invalid_argument("unknown maneuver " + j.dump());
  return *m;
}

}  // namespace

json to_json(const ConstraintRule& rule) {
  json guard = json::array();
  for (const auto& g : rule.guard) {
    guard.push_back({{"field", g.field == GuardField::TauMin ? "tau_min" : "ego_speed"},
                     {"op", g.op == Comparison::Less ? "<" : ">"},
                     {"threshold", g.threshold}});
  }
  return {{"scenario", std::string(sim::to_string(rule.scenario_kind))},
          {"forbidden_action", std::string(sim::to_token(rule.forbidden_action))},
          {"guard", guard}};
}

ConstraintRule constraint_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("constraint must be an object");
  ConstraintRule rule;
  rule.scenario_kind = kind_from_json(j.at("scenario"));
  rule.forbidden_action = action_from_json(j.at("forbidden_action"));
  const auto& guard = j.at("guard");
  if (!guard.is_array() || guard.empty()) throw std::invalid_argument("guard must be a nonempty array");
  for (const auto& g : guard) {
    GuardTerm term;
    const auto field = g.at("field").get<std::string>();
    if (field == "tau_min") term.field = GuardField::TauMin;
    else if (field == "ego_speed") term.field = GuardField::EgoSpeed;
    else throw std::invalid_argument("unknown guard field '" + field + "'");
    const auto op = g.at("op").get<std::string>();
    if (op == "<") term.op = Comparison::Less;
    else if (op == ">") term.op = Comparison::Greater;
    else throw std::invalid_argument("unknown guard op '" + op + "'");
    term.threshold = g.at("threshold").get<double>();
    if (!std::isfinite(term.threshold)) throw std::invalid_argument("guard threshold must be finite");
    rule.guard.push_back(term);
  }
  return rule;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: length " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

MemoryRepository::MemoryRepository(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("teacher.memory_capacity", "must be > 0");
}

void MemoryRepository::insert(MemoryEntry entry) {
  if (entry.lesson.size() > kMaxLessonChars) entry.lesson.resize(kMaxLessonChars);
  if (entries_.size() >= capacity_) {
    std::optional<std::size_t> victim;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].is_lesson()) continue;
      if (!victim || std::abs(entries_[i].episode_return) < std::abs(entries_[*victim].episode_return))
        victim = i;
    }
    entries_.erase(entries_.begin() + static_cast<long>(victim.value_or(0)));
  }
  entries_.push_back(std::move(entry));
}

std::vector<ConstraintRule> MemoryRepository::active_constraints() const {
  std::vector<ConstraintRule> out;
  for (const auto& e : entries_)
    for (const auto& c : e.constraints)
      if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  return out;
}

json MemoryRepository::to_json() const {
  json entries = json::array();
  for (const auto& e : entries_) {
    json constraints = json::array();
    for (const auto& c : e.constraints) constraints.push_back(teacher::to_json(c));
    entries.push_back({{"z", e.z},
                       {"scenario", std::string(sim::to_string(e.scenario_kind))},
                       {"action", std::string(sim::to_token(e.action))},
                       {"outcome", std::string(to_string(e.outcome))},
                       {"return", e.episode_return},
                       {"lesson", e.lesson},
                       {"constraints", constraints}});
  }
  return {{"schema_version", kMemorySchemaVersion}, {"capacity", capacity_}, {"entries", entries}};
}

MemoryRepository MemoryRepository::from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kMemorySchemaVersion) {
      throw ConfigError("teacher.memory_file", "unsupported memory schema_version " +
                                                   j.at("schema_version").dump());
    }
    MemoryRepository repo(j.at("capacity").get<std::size_t>());
    for (const auto& e : j.at("entries")) {
      MemoryEntry m;
      m.z = e.at("z").get<std::vector<double>>();
      m.scenario_kind = kind_from_json(e.at("scenario"));
      m.action = action_from_json(e.at("action"));
      m.outcome = outcome_from_string(e.at("outcome").get<std::string>());
      m.episode_return = e.at("return").get<double>();
      m.lesson = e.at("lesson").get<std::string>();
      for (const auto& c : e.at("constraints")) m.constraints.push_back(constraint_from_json(c));
      repo.insert(std::move(m));
    }
    return repo;
  } catch (const json::exception& e) {
    throw ConfigError("teacher.memory_file", std::string("malformed memory file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("teacher.memory_file", std::string("malformed memory file: ") + e.what());
  }
}

void MemoryRepository::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write memory file " + path.string());
  out << to_json().dump(2) << '\n';
}

MemoryRepository MemoryRepository::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("teacher.memory_file", "cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("teacher.memory_file", path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::vector<Retrieved> retrieve(const std::vector<double>& z, const MemoryRepository& memory,
                                std::size_t k) {
  if (k == 0) throw UsageError("retrieve: k must be >= 1");
  std::vector<Retrieved> all;
  all.reserve(memory.size());
  for (std::size_t i = 0; i < memory.size(); ++i)
    all.push_back({i, cosine_similarity(z, memory.at(i).z)});
  const auto n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<long>(n), all.end(),
                    [](const Retrieved& a, const Retrieved& b) {
                      return a.similarity != b.similarity ? a.similarity > b.similarity : a.index > b.index;
                    });
  all.resize(n);
  return all;
}

}  // namespace telldrive::teacher
