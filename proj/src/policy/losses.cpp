#include "telldrive/policy/losses.hpp"

#include <cmath>
#include <numeric>

#include "telldrive/errors.hpp"

namespace telldrive::policy {

using tensor::Tensor;
namespace ops = tensor;

namespace {

constexpr double kProbabilityFloor = 1e-8;

Tensor column(std::span<const double> values) {
  return Tensor({values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor flat(const Tensor& t) {
  if (t.rank() == 1) return t;
  if (t.rank() == 2 && t.dim(1) == 1) return ops::sum_rows(t);
  throw ShapeError("expected [B] or [B,1], got " + tensor::shape_str(t.shape()));
}

double value_of(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

Tensor ppo_policy_loss(const Tensor& log_prob, std::span<const double> old_log_prob,
                       std::span<const double> advantages, double clip) {
  if (log_prob.size() != old_log_prob.size() || log_prob.size() != advantages.size()) {
    throw ShapeError("ppo_policy_loss: batch sizes differ");
  }
  if (log_prob.size() == 0) throw UsageError("ppo_policy_loss: empty batch");
  const auto adv = column(advantages);
  const auto ratio = ops::exp(ops::sub(log_prob, column(old_log_prob)));
  const auto unclipped = ops::mul(ratio, adv);
  const auto clipped = ops::mul(ops::clamp(ratio, 1.0 - clip, 1.0 + clip), adv);
  return ops::scale(ops::mean(ops::minimum(unclipped, clipped)), -1.0);
}

std::vector<double> bellman_targets(std::span<const double> rewards, std::span<const double> next_values,
                                    std::span<const bool> done, double gamma) {
  if (rewards.size() != next_values.size() || rewards.size() != done.size()) {
    throw ShapeError("bellman_targets: batch sizes differ");
  }
  std::vector<double> y(rewards.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = rewards[i] + (done[i] ? 0.0 : gamma * next_values[i]);
  return y;
}

Tensor value_loss(const Tensor& predicted, std::span<const double> targets) {
  if (targets.empty()) throw UsageError("value_loss: empty batch");
  const auto p = flat(predicted);
  if (p.size() != targets.size()) throw ShapeError("value_loss: batch sizes differ");
  return ops::mean(ops::square(ops::sub(p, column(targets))));
}

ActionArray floor_distribution(const ActionArray& p) {
  ActionArray out;
  double total = 0.0;
  for (std::size_t i = 0; i < kActions; ++i) total += out[i] = std::max(p[i], kProbabilityFloor);
  for (auto& v : out) v /= total;
  return out;
}

ActionArray smoothed_one_hot(sim::Maneuver action, double on) {
  ActionArray out;
  out.fill((1.0 - on) / static_cast<double>(kActions - 1));
  out[static_cast<std::size_t>(sim::to_index(action))] = on;
  return out;
}

double kl_divergence(const ActionArray& p, const ActionArray& q) {
  const auto qf = floor_distribution(q);
  double kl = 0.0;
  for (std::size_t i = 0; i < kActions; ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(qf[i]));
  return kl;
}

Tensor kl_to_teacher(const Tensor& pi, const Tensor& log_pi, std::span<const ActionArray> teacher) {
  if (pi.rank() != 2 || pi.dim(1) != kActions || pi.shape() != log_pi.shape() || pi.dim(0) != teacher.size()) {
    throw ShapeError("kl_to_teacher: expected [B,5] distributions and B teacher rows, got " +
                     tensor::shape_str(pi.shape()));
  }
  std::vector<double> log_q;
  log_q.reserve(teacher.size() * kActions);
  for (const auto& row : teacher)
    for (double v : floor_distribution(row)) log_q.push_back(std::log(v));
  const Tensor lq({teacher.size(), kActions}, std::move(log_q));
  return ops::sum_rows(ops::mul(pi, ops::sub(log_pi, lq)));
}

double kl_penalty(double kl, double sigma, double lambda) {
  const double excess = std::max(0.0, kl - sigma);
  return lambda * excess * excess;
}

Tensor kl_penalty(const Tensor& kl_rows, std::span<const double> sigma, double lambda) {
  if (kl_rows.size() != sigma.size()) throw ShapeError("kl_penalty: batch sizes differ");
  if (sigma.empty()) return Tensor::scalar(0.0);
  return ops::scale(ops::mean(ops::square(ops::relu(ops::sub(kl_rows, column(sigma))))), lambda);
}

Tensor distill_loss(const Tensor& teacher_log_pi, std::span<const int> actions) {
  if (actions.empty()) return Tensor::scalar(0.0);
  return ops::scale(ops::mean(ops::pick(teacher_log_pi, actions)), -1.0);
}

Tensor entropy(const Tensor& pi, const Tensor& log_pi) {
  return ops::scale(ops::mean(ops::sum_rows(ops::mul(pi, log_pi))), -1.0);
}

Tensor total_loss(const LossTerms& t, const LossWeights& w, LossReport* report) {
  Tensor total = t.policy.defined() ? t.policy : Tensor::scalar(0.0);
  auto add = [&](const Tensor& term, double weight) {
    if (term.defined() && weight != 0.0) total = ops::add(total, ops::scale(term, weight));
  };
  add(t.value, w.value);
  add(t.q, w.value);
  add(t.distill, w.distill);
  add(t.kl_penalty, 1.0);
  add(t.entropy, -w.entropy);
  if (report) {
    report->policy_loss = value_of(t.policy);
    report->value_loss = value_of(t.value);
    report->q_loss = value_of(t.q);
    report->distill_loss = value_of(t.distill);
    report->kl_value = t.kl_value;
    report->kl_penalty = value_of(t.kl_penalty);
    report->entropy = value_of(t.entropy);
    report->total = total.item();
  }
  return total;
}

void normalize(std::vector<double>& values) {
  if (values.empty()) return;
  const double n = static_cast<double>(values.size());
  const double mu = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / n);
  for (auto& v : values) v = (v - mu) / (sd + 1e-8);
}

}  // namespace telldrive::policy
