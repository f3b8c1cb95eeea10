#pragma once

#include <span>
#include <vector>

#include "telldrive/policy/net.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::policy {

/// Clipped surrogate: mean of -min(rho A, clip(rho, 1-eps, 1+eps) A) with
/// rho = exp(log_prob - old_log_prob). `log_prob` is [B].
tensor::Tensor ppo_policy_loss(const tensor::Tensor& log_prob, std::span<const double> old_log_prob,
                               std::span<const double> advantages, double clip);

/// y = r + gamma * v_next * (1 - done).
std::vector<double> bellman_targets(std::span<const double> rewards, std::span<const double> next_values,
                                    std::span<const bool> done, double gamma);

/// Mean squared error of `predicted` ([B] or [B,1]) against targets. UsageError when empty.
tensor::Tensor value_loss(const tensor::Tensor& predicted, std::span<const double> targets);

/// Floors every probability at 1e-8 and renormalizes.
ActionArray floor_distribution(const ActionArray& p);

/// Teacher distribution for one chosen action: `on` there, the rest spread evenly.
ActionArray smoothed_one_hot(sim::Maneuver action, double on = 0.9);

/// KL(p || q) with q floored by floor_distribution; 0 log 0 = 0.
double kl_divergence(const ActionArray& p, const ActionArray& q);

/// Per-row KL(pi || teacher) -> [B]. `pi`, `log_pi` are [B,5].
tensor::Tensor kl_to_teacher(const tensor::Tensor& pi, const tensor::Tensor& log_pi,
                             std::span<const ActionArray> teacher);

/// lambda * max(0, kl - sigma)^2.
double kl_penalty(double kl, double sigma, double lambda);
/// Mean over rows of lambda * max(0, kl_i - sigma_i)^2.
tensor::Tensor kl_penalty(const tensor::Tensor& kl_rows, std::span<const double> sigma, double lambda);

/// Mean negative log-likelihood of the teacher head on demonstrated actions.
/// An empty demo set gives 0.
tensor::Tensor distill_loss(const tensor::Tensor& teacher_log_pi, std::span<const int> actions);

/// Mean entropy of the rows of pi.
tensor::Tensor entropy(const tensor::Tensor& pi, const tensor::Tensor& log_pi);

struct LossWeights {
  double value = 0.5;     // c_v, on both the state-value and the action-value terms
  double distill = 1.0;   // c_d; 0 outside the guidance window
  double entropy = 0.01;  // c_e
  double kl_lambda = 10.0;
};

struct LossTerms {
  tensor::Tensor policy;
  tensor::Tensor value;       // MSBE of V
  tensor::Tensor q;           // MSBE of the taken action's Q~ and Q^T (auxiliary)
  tensor::Tensor distill;
  tensor::Tensor kl_penalty;  // already multiplied by lambda
  tensor::Tensor entropy;
  double kl_value = 0.0;      // mean KL over the rows that have a teacher target
};

struct LossReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double q_loss = 0.0;
  double distill_loss = 0.0;
  double kl_value = 0.0;
  double kl_penalty = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

/// total = policy + c_v (value + q) + c_d distill + kl_penalty - c_e entropy.
/// Undefined terms count as 0.
tensor::Tensor total_loss(const LossTerms& terms, const LossWeights& weights, LossReport* report = nullptr);

/// In-place (x - mean) / (std + 1e-8); a single element becomes 0.
void normalize(std::vector<double>& values);

}  // namespace telldrive::policy
