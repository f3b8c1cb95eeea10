#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "telldrive/policy/losses.hpp"
#include "telldrive/policy/net.hpp"
#include "telldrive/teacher/teacher.hpp"
#include "telldrive/trainer/config.hpp"

namespace telldrive::trainer {

struct EvalReport {
  std::int64_t step = 0;
  double success_rate = 0.0;  // fraction of episodes ending in the success region
  double eval_reward = 0.0;   // mean undiscounted return
  double avg_speed = 0.0;     // m/s, mean over every evaluated decision step
  double delta_ttcp = 0.0;    // s, mean over episodes of the per-episode metric
  double decision_time = 0.0; // s, mean wall time of one greedy forward pass
  int episodes = 0;
};

/// Greedy (argmax pi) rollouts with the teacher disabled. Episode i is reset
/// with seed `seed_base + i`, so the report is deterministic apart from
/// decision_time. When `traces` is given, one trace record per decision step
/// is appended, tagged with its episode index.
EvalReport evaluate(const policy::FusionPolicyNet& net, const sim::ScenarioConfig& scenario,
                    const risk::RiskParams& risk, int n_episodes, std::uint64_t seed_base,
                    std::int64_t step = 0, std::vector<nlohmann::json>* traces = nullptr);

/// eps = max(floor, clip_initial * (1 - progress)).
double clip_at(const TrainConfig& c, double progress);
/// Linear from sigma_initial at step 0 to sigma_final at the end of the
/// guidance window; sigma_final afterwards (the KL term is off there anyway).
double sigma_at(const TrainConfig& c, std::int64_t global_step);

/// Generalized advantage estimates. `bootstrap` is V of the state following
/// the last row and is used only when that row is not terminal.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        std::span<const bool> done, double bootstrap, double gamma, double lambda);

struct Transition {
  std::vector<double> x;       // flattened observation
  std::vector<double> next_x;  // flattened observation after the step
  int action = 0;
  double log_prob = 0.0;  // log pi_old(a|s)
  double reward = 0.0;
  double value = 0.0;  // V(s) at collection time
  bool done = false;
  std::int64_t step = 0;  // global step at which the action was taken
  std::optional<int> teacher_action;
  policy::ActionArray teacher_pi{};  // smoothed one-hot; meaningful with teacher_action
};

/// Fixed-capacity on-policy storage; cleared after every update.
class RolloutBuffer {
 public:
  explicit RolloutBuffer(std::size_t capacity) : capacity_(capacity) { rows_.reserve(capacity); }

  void push(Transition t);
  void clear();
  std::size_t size() const { return rows_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return rows_.empty(); }
  const std::vector<Transition>& rows() const { return rows_; }
  const Transition& operator[](std::size_t i) const { return rows_.at(i); }

  /// V of the state after the last row (used when the rollout ends mid-episode).
  double bootstrap_value = 0.0;

 private:
  std::size_t capacity_;
  std::vector<Transition> rows_;
};

struct RolloutStats {
  std::int64_t steps = 0;
  int episodes_finished = 0;  // episodes that hit a terminal event
  std::int64_t teacher_queries = 0;
  std::vector<double> episode_returns;
};

struct UpdateReport {
  std::int64_t step = 0;  // global step when the update ran
  double clip = 0.0;
  std::size_t rows = 0;
  std::size_t teacher_rows = 0;
  policy::LossReport mean;  // averaged over minibatches
  std::size_t minibatches = 0;
};

using BackendFactory = std::function<std::unique_ptr<teacher::ChatBackend>(const TeacherConfig&)>;
/// scripted, remote (key from TELL_LLM_API_KEY), with replay/record wrappers.
std::unique_ptr<teacher::ChatBackend> make_backend(const TeacherConfig& config);

/// Network layout for a config: StudentOnly fusion for v-ppo, attention otherwise.
policy::NetConfig net_config(const GlobalConfig& config);

/// Deterministic per-episode reset seed.
std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t episode_index);

/// Collect -> update -> evaluate loop for one (config, seed).
///
/// Output directory layout: config.json (effective config), metrics.csv (one
/// row per evaluation), timing.csv (measured latencies when timing is "off"),
/// losses.csv (one row per update), traces.jsonl (final evaluation episodes),
/// checkpoints/step_<N>.tdck with a step_<N>.json state sidecar.
class Trainer {
 public:
  explicit Trainer(GlobalConfig config, BackendFactory factory = make_backend);

  /// Restores from a checkpoint written by save_checkpoint(). The effective
  /// config stored beside it is used; `output_dir` (when nonempty) replaces
  /// its output directory. Throws CheckpointError on CRC/architecture failure.
  static Trainer resume(const std::filesystem::path& checkpoint, const std::string& output_dir = {},
                        BackendFactory factory = make_backend);

  /// Runs to total_steps (or until `stop_after_step` is reached at an update
  /// boundary) and writes every artifact. Returns the last evaluation.
  std::optional<EvalReport> run(std::optional<std::int64_t> stop_after_step = std::nullopt);

  /// One rollout of min(rollout_size, remaining) steps; evaluations falling
  /// inside the rollout run as soon as their step is reached, except one on
  /// the final step, which waits for the update.
  RolloutStats collect_rollout();
  UpdateReport update();
  bool finished() const { return step_ >= config_.train.total_steps; }

  void save_checkpoint(const std::filesystem::path& path) const;

  const GlobalConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }
  const std::vector<EvalReport>& evals() const { return evals_; }
  const std::vector<UpdateReport>& updates() const { return updates_; }
  const RolloutBuffer& buffer() const { return buffer_; }
  const policy::FusionPolicyNet& policy() const { return net_; }
  policy::FusionPolicyNet& policy() { return net_; }
  bool teacher_constructed() const { return teacher_ != nullptr; }
  /// Queries made by the teacher (including before a resume).
  std::int64_t teacher_queries() const;
  /// Decision steps taken inside the guidance window; audited against teacher_queries().
  std::int64_t window_decisions() const { return window_decisions_; }
  const teacher::Teacher* teacher() const { return teacher_.get(); }

 private:
  void open_outputs(bool truncate);
  void write_metrics_row(const EvalReport& r);
  void write_loss_row(const UpdateReport& u);
  void run_eval(bool final_pass);
  void finish_episode(std::vector<risk::EpisodeStep>& steps, double ret, const sim::EventSet& events,
                      bool touched_window);
  int sample(const policy::ActionArray& pi);

  GlobalConfig config_;
  BackendFactory factory_;
  policy::FusionPolicyNet net_;
  policy::FusionPolicyNet target_;  // V_g for the Q regression targets, refreshed after each update
  std::unique_ptr<teacher::Teacher> teacher_;
  RolloutBuffer buffer_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  std::uint64_t episodes_ = 0;
  std::int64_t window_decisions_ = 0;
  std::int64_t queries_before_resume_ = 0;
  std::int64_t evals_since_checkpoint_ = 0;
  bool pending_eval_ = false;
  std::vector<EvalReport> evals_;
  std::vector<UpdateReport> updates_;
  std::filesystem::path out_;
  std::ofstream metrics_, timing_, losses_;
};

/// Metrics CSV header and row formatting shared by train, eval and ablate.
std::string metrics_header();
std::string metrics_row(const EvalReport& r, Variant variant, const std::string& scenario, std::uint64_t seed,
                        bool report_time);

}  // namespace telldrive::trainer
