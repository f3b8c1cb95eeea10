#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "telldrive/sim/types.hpp"
#include "telldrive/tensor/ops.hpp"
#include "telldrive/tensor/param_store.hpp"

namespace telldrive::policy {

inline constexpr std::size_t kActions = 5;
using ActionArray = std::array<double, kActions>;

/// Observation scaling applied by flatten(). Lateral features get a finer
/// scale so that one 4 m lane offset is a visible input change.
inline constexpr double kLongitudinalScale = 100.0;  // m
inline constexpr double kLateralScale = 10.0;        // m
inline constexpr double kSpeedScale = 30.0;          // m/s
inline constexpr double kLateralSpeedScale = 10.0;   // m/s

inline std::size_t input_dim(std::size_t slots) { return 6 + 6 * slots; }
/// Ego block then every neighbor column (zeros for empty slots), scaled.
std::vector<double> flatten(const sim::Observation& obs);

enum class FusionMode {
  Attention,    // h = W_O [head_1 | head_2] + h^S
  StudentOnly,  // h = h^S; no teacher encoder, heads or attention
};
std::string_view to_string(FusionMode m);

struct NetConfig {
  std::size_t input_dim = 42;
  std::size_t hidden = 128;
  std::size_t heads = 2;
  FusionMode fusion = FusionMode::Attention;
};

/// FNV-1a over the layer layout; stored in checkpoints to reject mismatched loads.
std::uint64_t arch_hash(const NetConfig& config);

/// Differentiable outputs for a batch x [B, input_dim].
struct ForwardPass {
  tensor::Tensor h_s, h_t, h;           // [B, hidden]; h_t undefined without attention
  tensor::Tensor logits, log_pi, pi;    // [B, 5]
  tensor::Tensor q;                     // [B, 5]
  tensor::Tensor v;                     // [B, 1]
  tensor::Tensor teacher_log_pi, teacher_pi, teacher_q;  // [B, 5]; undefined without attention
  std::vector<tensor::Tensor> attention;  // per head [B, hidden, hidden]
};

/// Plain values for one input.
struct PolicyOutput {
  ActionArray pi{};
  ActionArray q_values{};
  double v = 0.0;
  ActionArray teacher_pi_hat{};  // zeros without attention
  ActionArray teacher_q_hat{};
  std::vector<std::vector<double>> attention;  // per head, hidden x hidden row-major
};

/// Dual-encoder policy. Each encoder is input -> hidden -> hidden with tanh.
/// Per attention head: Q = h^S W_Q, K = h^T W_K, V = h^T W_V and
/// alpha = softmax(Q K^T / sqrt(hidden)) over the hidden x hidden outer product,
/// head = alpha V. Heads are concatenated and mapped back by W_O (no bias),
/// then added to h^S. Final heads read h; teacher heads read h^T.
class FusionPolicyNet {
 public:
  FusionPolicyNet(NetConfig config, std::uint64_t seed);

  const NetConfig& config() const { return config_; }
  std::uint64_t arch_hash() const { return policy::arch_hash(config_); }
  bool has_teacher_path() const { return config_.fusion == FusionMode::Attention; }

  ForwardPass forward(const tensor::Tensor& x) const;
  /// Inference without building a graph.
  PolicyOutput forward(std::span<const double> x) const;

  tensor::ParamStore& params() { return params_; }
  const tensor::ParamStore& params() const { return params_; }

 private:
  NetConfig config_;
  tensor::ParamStore params_;
};

/// Row-major [rows, input_dim] batch from flattened inputs.
tensor::Tensor make_batch(const std::vector<std::vector<double>>& rows);

std::size_t argmax(const ActionArray& values);

}  // namespace telldrive::policy
