#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "telldrive/risk/params.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::trainer {

enum class Variant { VPpo, APpo, LaPpo };
std::string_view to_string(Variant v);  // "v-ppo" | "a-ppo" | "la-ppo"
std::optional<Variant> variant_from_string(std::string_view s);

struct TrainConfig {
  std::int64_t total_steps = 100000;
  std::int64_t eval_interval = 500;
  std::int64_t rollout_size = 1600;
  std::int64_t batch_size = 128;
  double lr = 5e-4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_initial = 0.2;
  double clip_floor = 0.02;
  int epochs = 10;
  double teacher_window_fraction = 0.10;
  double sigma_initial = 0.1;
  double sigma_final = 2.0;
  double kl_lambda = 10.0;
  double value_coef = 0.5;
  double distill_coef = 1.0;
  double entropy_coef = 0.01;
  int eval_episodes = 20;
  std::uint64_t eval_seed = 1000000;  // eval episode i uses eval_seed + i
  int checkpoint_every_evals = 10;
  std::uint64_t seed = 1;
  Variant variant = Variant::LaPpo;
  std::size_t hidden = 128;
  std::size_t heads = 2;
  /// "off": metrics.csv reports decision_time_s as 0 so the file is
  /// reproducible; measured latencies go to timing.csv. "wall": measured
  /// latencies go straight into metrics.csv.
  std::string timing = "off";

  /// Decision steps inside the guidance window: floor(fraction * total_steps).
  std::int64_t window_steps() const;
  bool uses_teacher() const { return variant == Variant::LaPpo; }
  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

struct TeacherConfig {
  std::string backend = "scripted";  // scripted | remote
  std::string endpoint;
  std::string model;
  double temperature = 0.0;
  double timeout_s = 30.0;
  int n_shot = 3;
  std::size_t memory_capacity = 20;
  std::string memory_file;  // loaded when it exists, written at the end of a run
  int max_retries = 2;
  int max_tokens = 512;
  std::string record;  // JSONL transcript written while running
  std::string replay;  // JSONL transcript served instead of the backend
};

struct GlobalConfig {
  /// Name of the scenario preset the scenario block starts from.
  std::string scenario_preset = "merge-lite";
  sim::ScenarioConfig scenario = sim::ScenarioConfig::merge_lite();
  TrainConfig train;
  risk::RiskParams risk;
  TeacherConfig teacher;
  std::string output_dir = "runs/default";

  /// Throws ConfigError. Teacher settings are only checked for variants that
  /// query the teacher.
  void validate() const;
};

std::vector<std::string> preset_names();
/// Throws ConfigError("scenario.preset", ...) for an unknown name.
sim::ScenarioConfig scenario_preset(const std::string& name);

/// Fully resolved config; parse_config(to_json(c)) == c.
nlohmann::json to_json(const GlobalConfig& c);

/// Reads a config document on top of the defaults. Every key must be known;
/// the scenario block starts from its "preset" (default merge-lite) and then
/// applies the explicit fields. Throws ConfigError naming the offending key.
GlobalConfig parse_config(const nlohmann::json& doc);

/// Applies "a.b.c=value" to `doc`. The value is read as JSON when it parses,
/// otherwise as a string. Throws ConfigError on a malformed override.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Reads the JSON document at `path`; ConfigError naming the path when it is
/// missing or malformed. An empty path gives an empty object.
nlohmann::json read_config_document(const std::filesystem::path& path);

/// Reads the JSON file at `path` (ConfigError naming the path when it is
/// missing or malformed), applies the overrides, parses and validates.
/// An empty path starts from an empty document.
GlobalConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace telldrive::trainer
