#include "telldrive/trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "telldrive/errors.hpp"
#include "telldrive/risk/risk.hpp"
#include "telldrive/sim/trace.hpp"

namespace telldrive::trainer {

using nlohmann::json;
using policy::ActionArray;
using policy::FusionPolicyNet;
using tensor::Tensor;

namespace {

constexpr std::size_t kTargetChunk = 128;

void create_parent(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json to_json(const EvalReport& r) {
  return {{"step", r.step},
          {"success_rate", r.success_rate},
          {"eval_reward", r.eval_reward},
          {"avg_speed", r.avg_speed},
          {"delta_ttcp", r.delta_ttcp},
          {"decision_time", r.decision_time},
          {"episodes", r.episodes}};
}

EvalReport eval_from_json(const json& j) {
  EvalReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.success_rate = j.at("success_rate").get<double>();
  r.eval_reward = j.at("eval_reward").get<double>();
  r.avg_speed = j.at("avg_speed").get<double>();
  r.delta_ttcp = j.at("delta_ttcp").get<double>();
  r.decision_time = j.at("decision_time").get<double>();
  r.episodes = j.at("episodes").get<int>();
  return r;
}

json to_json(const UpdateReport& u) {
  const auto& m = u.mean;
  return {{"step", u.step},
          {"clip", u.clip},
          {"rows", u.rows},
          {"teacher_rows", u.teacher_rows},
          {"minibatches", u.minibatches},
          {"loss",
           {m.policy_loss, m.value_loss, m.q_loss, m.distill_loss, m.kl_value, m.kl_penalty, m.entropy, m.total}}};
}

UpdateReport update_from_json(const json& j) {
  UpdateReport u;
  u.step = j.at("step").get<std::int64_t>();
  u.clip = j.at("clip").get<double>();
  u.rows = j.at("rows").get<std::size_t>();
  u.teacher_rows = j.at("teacher_rows").get<std::size_t>();
  u.minibatches = j.at("minibatches").get<std::size_t>();
  const auto& l = j.at("loss");
  auto& m = u.mean;
  m.policy_loss = l.at(0);
  m.value_loss = l.at(1);
  m.q_loss = l.at(2);
  m.distill_loss = l.at(3);
  m.kl_value = l.at(4);
  m.kl_penalty = l.at(5);
  m.entropy = l.at(6);
  m.total = l.at(7);
  return u;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

// ---------------------------------------------------------------------------
// Schedules and estimators

double clip_at(const TrainConfig& c, double progress) {
  return std::max(c.clip_floor, c.clip_initial * (1.0 - progress));
}

double sigma_at(const TrainConfig& c, std::int64_t global_step) {
  const auto window = c.window_steps();
  if (window <= 0 || global_step >= window) return c.sigma_final;
  const double f = static_cast<double>(global_step) / static_cast<double>(window);
  return c.sigma_initial + (c.sigma_final - c.sigma_initial) * f;
}

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, std::span<const bool> done,
                        double bootstrap, double gamma, double lambda) {
  const auto n = rewards.size();
  if (values.size() != n || done.size() != n) throw ShapeError("gae: batch sizes differ");
  std::vector<double> adv(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_v = i + 1 < n ? values[i + 1] : bootstrap;
    const double live = done[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_v * live - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    adv[i] = next_adv;
  }
  return adv;
}

policy::NetConfig net_config(const GlobalConfig& c) {
  policy::NetConfig n;
  n.input_dim = policy::input_dim(static_cast<std::size_t>(c.scenario.neighbor_slots));
  n.hidden = c.train.hidden;
  n.heads = c.train.heads;
  n.fusion = c.train.variant == Variant::VPpo ? policy::FusionMode::StudentOnly : policy::FusionMode::Attention;
  return n;
}

std::uint64_t episode_seed(std::uint64_t run_seed, std::uint64_t episode_index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = run_seed * 0x9E3779B97F4A7C15ULL + episode_index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void RolloutBuffer::push(Transition t) {
  if (rows_.size() >= capacity_) throw UsageError("rollout buffer is full");
  rows_.push_back(std::move(t));
}

void RolloutBuffer::clear() {
  rows_.clear();
  bootstrap_value = 0.0;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const FusionPolicyNet& net, const sim::ScenarioConfig& scenario, const risk::RiskParams& risk,
                    int n_episodes, std::uint64_t seed_base, std::int64_t step, std::vector<json>* traces) {
  if (n_episodes < 1) throw UsageError("evaluate: n_episodes must be >= 1");
  EvalReport report;
  report.step = step;
  report.episodes = n_episodes;
  double speed_sum = 0.0, time_sum = 0.0, ttcp_sum = 0.0, return_sum = 0.0;
  std::int64_t decisions = 0;
  int successes = 0;
  for (int e = 0; e < n_episodes; ++e) {
    auto [st, obs] = sim::reset(scenario, seed_base + static_cast<std::uint64_t>(e));
    st.risk = risk;
    std::vector<double> taus;
    double ret = 0.0;
    while (!st.terminal) {
      taus.push_back(risk::assess(st, risk).tau_min);
      const auto x = policy::flatten(obs);
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = net.forward(std::span<const double>(x));
      time_sum += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto action = sim::maneuver_from_index(static_cast<int>(policy::argmax(out.pi)));
      std::optional<sim::ScenarioState> before;
      if (traces) before = st;
      auto outcome = sim::step(st, action);
      if (traces) {
        auto rec = sim::trace_record(*before, action, outcome.reward, outcome.events);
        rec["episode"] = e;
        traces->push_back(std::move(rec));
      }
      ret += outcome.reward;
      speed_sum += st.ego().speed;
      ++decisions;
      obs = std::move(outcome.observation);
      if (outcome.done && outcome.events.has(sim::Event::Success)) ++successes;
    }
    return_sum += ret;
    ttcp_sum += risk::delta_ttcp_metric(taus, risk.horizon);
  }
  const double n = n_episodes;
  report.success_rate = successes / n;
  report.eval_reward = return_sum / n;
  report.avg_speed = decisions ? speed_sum / static_cast<double>(decisions) : 0.0;
  report.delta_ttcp = ttcp_sum / n;
  report.decision_time = decisions ? time_sum / static_cast<double>(decisions) : 0.0;
  return report;
}

std::string metrics_header() {
  return "step,variant,scenario,success_rate,eval_reward,avg_speed,delta_ttcp,decision_time_s,seed";
}

std::string metrics_row(const EvalReport& r, Variant variant, const std::string& scenario, std::uint64_t seed,
                        bool report_time) {
  std::ostringstream os;
  os << r.step << ',' << to_string(variant) << ',' << scenario << ',' << fmt(r.success_rate) << ','
     << fmt(r.eval_reward) << ',' << fmt(r.avg_speed) << ',' << fmt(r.delta_ttcp) << ','
     << (report_time ? fmt(r.decision_time) : std::string("0")) << ',' << seed;
  return os.str();
}

// ---------------------------------------------------------------------------
// Backends

std::unique_ptr<teacher::ChatBackend> make_backend(const TeacherConfig& config) {
  if (!config.replay.empty()) return std::make_unique<teacher::ReplayBackend>(config.replay);
  std::unique_ptr<teacher::ChatBackend> backend;
  if (config.backend == "scripted") {
    backend = std::make_unique<teacher::ScriptedBackend>();
  } else if (config.backend == "remote") {
    teacher::RemoteOptions o;
    o.endpoint = config.endpoint;
    o.model = config.model;
    if (const char* key = std::getenv("TELL_LLM_API_KEY")) o.api_key = key;
    o.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(config.timeout_s * 1000.0));
    backend = std::make_unique<teacher::RemoteBackend>(o);
  } else {
    throw ConfigError("teacher.backend", "must be \"scripted\" or \"remote\"");
  }
  if (!config.record.empty()) {
    create_parent(config.record);
    return std::make_unique<teacher::RecordingBackend>(std::move(backend), config.record);
  }
  return backend;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(GlobalConfig config, BackendFactory factory)
    : config_(std::move(config)),
      factory_(std::move(factory)),
      net_(net_config(config_), config_.train.seed),
      target_(net_config(config_), config_.train.seed),
      buffer_(static_cast<std::size_t>(config_.train.rollout_size)),
      rng_(config_.train.seed),
      out_(config_.output_dir) {
  config_.validate();
  target_.params().copy_values_from(net_.params());
  if (config_.train.uses_teacher()) {
    if (!factory_) throw UsageError("a teacher backend factory is required for la-ppo");
    const auto& t = config_.teacher;
    teacher::MemoryRepository memory(t.memory_capacity);
    if (!t.memory_file.empty() && std::filesystem::exists(t.memory_file))
      memory = teacher::MemoryRepository::load(t.memory_file);
    teacher::TeacherOptions options;
    options.n_shot = t.n_shot;
    options.decide.max_retries = t.max_retries;
    options.decide.temperature = t.temperature;
    options.decide.max_tokens = t.max_tokens;
    options.risk = config_.risk;
    teacher_ = std::make_unique<teacher::Teacher>(factory_(t), std::move(memory), options);
  }
  open_outputs(true);
}

std::int64_t Trainer::teacher_queries() const {
  return queries_before_resume_ + (teacher_ ? static_cast<std::int64_t>(teacher_->query_count()) : 0);
}

void Trainer::open_outputs(bool truncate) {
  std::filesystem::create_directories(out_);
  {
    std::ofstream cfg(out_ / "config.json");
    cfg << to_json(config_).dump(2) << '\n';
  }
  const auto mode = truncate ? std::ios::trunc : std::ios::app;
  metrics_.open(out_ / "metrics.csv", std::ios::out | mode);
  losses_.open(out_ / "losses.csv", std::ios::out | mode);
  if (!metrics_ || !losses_) throw std::runtime_error("cannot write to output directory " + out_.string());
  if (truncate) {
    metrics_ << metrics_header() << '\n';
    losses_ << "update,step,clip,rows,teacher_rows,policy_loss,value_loss,q_loss,distill_loss,kl,kl_penalty,"
               "entropy,total\n";
  }
  if (config_.train.timing == "off") {
    timing_.open(out_ / "timing.csv", std::ios::out | mode);
    if (truncate) timing_ << "step,decision_time_s\n";
  }
  metrics_.flush();
  losses_.flush();
}

void Trainer::write_metrics_row(const EvalReport& r) {
  const bool wall = config_.train.timing == "wall";
  metrics_ << metrics_row(r, config_.train.variant, config_.scenario_preset, config_.train.seed, wall) << '\n';
  metrics_.flush();
  if (!wall) {
    timing_ << r.step << ',' << fmt(r.decision_time) << '\n';
    timing_.flush();
  }
}

void Trainer::write_loss_row(const UpdateReport& u) {
  const auto& m = u.mean;
  losses_ << updates_.size() << ',' << u.step << ',' << fmt(u.clip) << ',' << u.rows << ',' << u.teacher_rows << ','
          << fmt(m.policy_loss) << ',' << fmt(m.value_loss) << ',' << fmt(m.q_loss) << ',' << fmt(m.distill_loss)
          << ',' << fmt(m.kl_value) << ',' << fmt(m.kl_penalty) << ',' << fmt(m.entropy) << ',' << fmt(m.total)
          << '\n';
  losses_.flush();
}

void Trainer::run_eval(bool) {
  const auto& t = config_.train;
  auto report = evaluate(net_, config_.scenario, config_.risk, t.eval_episodes, t.eval_seed, step_);
  evals_.push_back(report);
  ++evals_since_checkpoint_;
  write_metrics_row(report);
}

int Trainer::sample(const ActionArray& pi) {
  const double u = unit(rng_);
  double acc = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    acc += pi[i];
    if (u < acc) return static_cast<int>(i);
  }
  // rounding left u above the total mass: take the last action with mass
  for (std::size_t i = pi.size(); i-- > 0;)
    if (pi[i] > 0.0) return static_cast<int>(i);
  return 0;
}

void Trainer::finish_episode(std::vector<risk::EpisodeStep>& steps, double ret, const sim::EventSet& events,
                             bool touched_window) {
  if (teacher_ && touched_window && !steps.empty()) teacher_->end_episode(steps, ret, events);
  steps.clear();
}

RolloutStats Trainer::collect_rollout() {
  if (!buffer_.empty()) throw UsageError("collect_rollout: buffer must be empty");
  if (finished()) throw UsageError("collect_rollout: training already finished");
  const auto& t = config_.train;
  const auto n = std::min<std::int64_t>(t.rollout_size, t.total_steps - step_);
  const auto window = t.uses_teacher() ? t.window_steps() : 0;
  RolloutStats stats;

  auto new_episode = [&] {
    auto [st, obs] = sim::reset(config_.scenario, episode_seed(t.seed, episodes_++));
    st.risk = config_.risk;
    return std::pair{std::move(st), std::move(obs)};
  };
  auto [st, obs] = new_episode();
  std::vector<risk::EpisodeStep> episode;
  double ret = 0.0;
  bool touched_window = false;
  const auto queries_at_start = teacher_queries();

  for (std::int64_t i = 0; i < n; ++i) {
    Transition row;
    row.x = policy::flatten(obs);
    row.step = step_;
    const auto out = net_.forward(std::span<const double>(row.x));
    row.action = sample(out.pi);
    row.log_prob = std::log(std::max(out.pi[static_cast<std::size_t>(row.action)], 1e-300));
    row.value = out.v;
    const auto action = sim::maneuver_from_index(row.action);

    const bool in_window = step_ < window;
    if (in_window) {
      const auto decision = teacher_->decide_step(st, obs);
      row.teacher_action = sim::to_index(decision.action);
      row.teacher_pi = policy::smoothed_one_hot(decision.action);
      ++window_decisions_;
      touched_window = true;
    }

    std::optional<sim::ScenarioState> before;
    if (teacher_ && touched_window) before = st;
    sim::StepOutcome outcome;
    try {
      outcome = sim::step(st, action);
    } catch (const std::exception& e) {
      throw std::runtime_error("environment fault at step " + std::to_string(step_) + " (episode " +
                               std::to_string(episodes_ - 1) + "): " + e.what());
    }
    if (before) episode.push_back({std::move(*before), action, st, outcome.events});

    row.reward = outcome.reward;
    row.done = outcome.done;
    row.next_x = policy::flatten(outcome.observation);
    ret += outcome.reward;
    obs = std::move(outcome.observation);
    buffer_.push(std::move(row));
    ++step_;
    ++stats.steps;

    if (outcome.done) {
      ++stats.episodes_finished;
      stats.episode_returns.push_back(ret);
      finish_episode(episode, ret, outcome.events, touched_window);
      ret = 0.0;
      touched_window = false;
      if (i + 1 < n) std::tie(st, obs) = new_episode();
    }
    if (step_ % t.eval_interval == 0) {
      if (i + 1 < n) {
        run_eval(false);
      } else {
        pending_eval_ = true;
      }
    }
  }
  const auto& last = buffer_.rows().back();
  if (!last.done) {
    buffer_.bootstrap_value = net_.forward(std::span<const double>(last.next_x)).v;
    finish_episode(episode, ret, {}, touched_window);
  }
  stats.teacher_queries = teacher_queries() - queries_at_start;
  return stats;
}

UpdateReport Trainer::update() {
  if (buffer_.empty()) throw UsageError("update: buffer is empty");
  const auto& t = config_.train;
  const auto& rows = buffer_.rows();
  const auto n = rows.size();
  const std::int64_t start_step = rows.front().step;

  UpdateReport report;
  report.step = step_;
  report.rows = n;
  report.clip = clip_at(t, static_cast<double>(start_step) / static_cast<double>(t.total_steps));

  std::vector<double> rewards(n), values(n);
  // std::vector<bool> has no contiguous storage to take a span of
  const auto done = std::make_unique<bool[]>(n);
  for (std::size_t i = 0; i < n; ++i) {
    rewards[i] = rows[i].reward;
    values[i] = rows[i].value;
    done[i] = rows[i].done;
    if (rows[i].teacher_action) ++report.teacher_rows;
  }
  const std::span<const bool> done_span(done.get(), n);

  const auto adv = gae(rewards, values, done_span, buffer_.bootstrap_value, t.gamma, t.gae_lambda);
  std::vector<double> returns(n);
  for (std::size_t i = 0; i < n; ++i) returns[i] = adv[i] + values[i];

  // Q targets r + gamma V_g(s') (1 - done) from the frozen copy.
  std::vector<double> next_v(n);
  {
    tensor::NoGradGuard no_grad;
    for (std::size_t s = 0; s < n; s += kTargetChunk) {
      const auto e = std::min(n, s + kTargetChunk);
      std::vector<std::vector<double>> chunk;
      for (std::size_t i = s; i < e; ++i) chunk.push_back(rows[i].next_x);
      const auto v = target_.forward(policy::make_batch(chunk)).v;
      for (std::size_t i = s; i < e; ++i) next_v[i] = v.at(i - s);
    }
  }
  const auto q_targets = policy::bellman_targets(rewards, next_v, done_span, t.gamma);

  policy::LossWeights weights;
  weights.value = t.value_coef;
  weights.distill = t.distill_coef;
  weights.entropy = t.entropy_coef;
  weights.kl_lambda = t.kl_lambda;
  tensor::AdamOptions adam;
  adam.lr = t.lr;

  std::vector<std::size_t> order(n);
  const auto batch = static_cast<std::size_t>(t.batch_size);
  policy::LossReport sum{};
  for (int epoch = 0; epoch < t.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng_() % i]);
    for (std::size_t s = 0; s < n; s += batch) {
      const auto e = std::min(n, s + batch);
      const auto m = e - s;
      std::vector<std::vector<double>> xs;
      std::vector<int> actions;
      std::vector<double> old_lp, mb_adv, mb_ret, mb_q;
      std::vector<std::size_t> teacher_idx;
      std::vector<int> teacher_actions;
      std::vector<ActionArray> teacher_pis;
      std::vector<double> sigmas;
      for (std::size_t k = 0; k < m; ++k) {
        const auto& r = rows[order[s + k]];
        xs.push_back(r.x);
        actions.push_back(r.action);
        old_lp.push_back(r.log_prob);
        mb_adv.push_back(adv[order[s + k]]);
        mb_ret.push_back(returns[order[s + k]]);
        mb_q.push_back(q_targets[order[s + k]]);
        if (r.teacher_action) {
          teacher_idx.push_back(k);
          teacher_actions.push_back(*r.teacher_action);
          teacher_pis.push_back(r.teacher_pi);
          sigmas.push_back(sigma_at(t, r.step));
        }
      }
      policy::normalize(mb_adv);

      const auto fp = net_.forward(policy::make_batch(xs));
      policy::LossTerms terms;
      terms.policy = policy::ppo_policy_loss(tensor::pick(fp.log_pi, actions), old_lp, mb_adv, report.clip);
      terms.value = policy::value_loss(fp.v, mb_ret);
      terms.q = policy::value_loss(tensor::pick(fp.q, actions), mb_q);
      if (fp.teacher_q.defined())
        terms.q = tensor::add(terms.q, policy::value_loss(tensor::pick(fp.teacher_q, actions), mb_q));
      terms.entropy = policy::entropy(fp.pi, fp.log_pi);
      if (!teacher_idx.empty() && net_.has_teacher_path()) {
        const auto kl_rows = policy::kl_to_teacher(tensor::gather_rows(fp.pi, teacher_idx),
                                                   tensor::gather_rows(fp.log_pi, teacher_idx), teacher_pis);
        terms.kl_penalty = policy::kl_penalty(kl_rows, sigmas, t.kl_lambda);
        terms.kl_value = tensor::mean(kl_rows).item();
        terms.distill = policy::distill_loss(tensor::gather_rows(fp.teacher_log_pi, teacher_idx), teacher_actions);
      }
      policy::LossReport lr;
      const auto total = policy::total_loss(terms, weights, &lr);
      net_.params().zero_grad();
      tensor::backward(total);
      net_.params().adam_step(adam);

      sum.policy_loss += lr.policy_loss;
      sum.value_loss += lr.value_loss;
      sum.q_loss += lr.q_loss;
      sum.distill_loss += lr.distill_loss;
      sum.kl_value += lr.kl_value;
      sum.kl_penalty += lr.kl_penalty;
      sum.entropy += lr.entropy;
      sum.total += lr.total;
      ++report.minibatches;
    }
  }
  const double k = static_cast<double>(report.minibatches);
  report.mean = {sum.policy_loss / k, sum.value_loss / k, sum.q_loss / k,  sum.distill_loss / k,
                 sum.kl_value / k,    sum.kl_penalty / k, sum.entropy / k, sum.total / k};
  target_.params().copy_values_from(net_.params());
  buffer_.clear();
  updates_.push_back(report);
  write_loss_row(report);
  return report;
}

std::optional<EvalReport> Trainer::run(std::optional<std::int64_t> stop_after_step) {
  const auto& t = config_.train;
  const auto ckpt_dir = out_ / "checkpoints";
  auto checkpoint = [&] {
    std::filesystem::create_directories(ckpt_dir);
    save_checkpoint(ckpt_dir / ("step_" + std::to_string(step_) + ".tdck"));
    evals_since_checkpoint_ = 0;
  };
  while (!finished()) {
    collect_rollout();
    update();
    if (pending_eval_) {
      pending_eval_ = false;
      run_eval(false);
    }
    if (evals_since_checkpoint_ >= t.checkpoint_every_evals && !finished()) checkpoint();
    if (stop_after_step && step_ >= *stop_after_step && !finished()) return evals_.empty() ? std::nullopt : std::optional(evals_.back());
  }
  checkpoint();

  std::vector<json> traces;
  evaluate(net_, config_.scenario, config_.risk, t.eval_episodes, t.eval_seed, step_, &traces);
  std::ofstream tr(out_ / "traces.jsonl");
  for (const auto& rec : traces) tr << rec.dump() << '\n';
  if (teacher_) {
    teacher_->memory().save(out_ / "teacher_memory.json");
    if (!config_.teacher.memory_file.empty()) {
      create_parent(config_.teacher.memory_file);
      teacher_->memory().save(config_.teacher.memory_file);
    }
  }
  return evals_.empty() ? std::nullopt : std::optional(evals_.back());
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  if (!buffer_.empty()) throw UsageError("checkpoints are taken between updates");
  tensor::save_checkpoint(path, net_.params(), net_.arch_hash());
  std::ostringstream rng_state;
  rng_state << rng_;
  json evals = json::array(), updates = json::array();
  for (const auto& e : evals_) evals.push_back(to_json(e));
  for (const auto& u : updates_) updates.push_back(to_json(u));
  json state = {{"step", step_},
                {"episodes", episodes_},
                {"window_decisions", window_decisions_},
                {"teacher_queries", teacher_queries()},
                {"evals_since_checkpoint", evals_since_checkpoint_},
                {"rng", rng_state.str()},
                {"evals", evals},
                {"updates", updates},
                {"memory", teacher_ ? teacher_->memory().to_json() : json(nullptr)},
                {"config", to_json(config_)}};
  std::ofstream out(sidecar_path(path));
  out << state.dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + sidecar_path(path).string());
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const std::string& output_dir,
                        BackendFactory factory) {
  const auto side = sidecar_path(checkpoint);
  std::ifstream in(side);
  if (!in) throw CheckpointError("missing checkpoint state file " + side.string());
  const json state = json::parse(in, nullptr, false);
  if (state.is_discarded() || !state.is_object())
    throw CheckpointError("checkpoint state file is not valid JSON: " + side.string());
  try {
    auto config = parse_config(state.at("config"));
    if (!output_dir.empty()) config.output_dir = output_dir;
    // The teacher memory comes from the checkpoint, not from memory_file.
    const auto memory_file = config.teacher.memory_file;
    config.teacher.memory_file.clear();
    Trainer tr(std::move(config), std::move(factory));
    tr.config_.teacher.memory_file = memory_file;
    tensor::load_checkpoint(checkpoint, tr.net_.params(), tr.net_.arch_hash());
    tr.target_.params().copy_values_from(tr.net_.params());
    tr.step_ = state.at("step").get<std::int64_t>();
    tr.episodes_ = state.at("episodes").get<std::uint64_t>();
    tr.window_decisions_ = state.at("window_decisions").get<std::int64_t>();
    tr.queries_before_resume_ = state.at("teacher_queries").get<std::int64_t>();
    tr.evals_since_checkpoint_ = state.at("evals_since_checkpoint").get<std::int64_t>();
    std::istringstream rng_state(state.at("rng").get<std::string>());
    rng_state >> tr.rng_;
    if (!rng_state) throw CheckpointError("corrupt RNG state in " + side.string());
    if (tr.teacher_ && !state.at("memory").is_null())
      tr.teacher_->memory() = teacher::MemoryRepository::from_json(state.at("memory"));
    for (const auto& e : state.at("evals")) {
      tr.evals_.push_back(eval_from_json(e));
      tr.write_metrics_row(tr.evals_.back());
    }
    for (const auto& u : state.at("updates")) {
      tr.updates_.push_back(update_from_json(u));
      tr.write_loss_row(tr.updates_.back());
    }
    return tr;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint state " + side.string() + ": " + e.what());
  }
}

}  // namespace telldrive::trainer
