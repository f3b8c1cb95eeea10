#include "telldrive/policy/net.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "telldrive/errors.hpp"

namespace telldrive::policy {

using tensor::Tensor;
namespace ops = tensor;

std::vector<double> flatten(const sim::Observation& obs) {
  std::vector<double> out;
  out.reserve(input_dim(obs.slots()));
  auto push_block = [&](const sim::FeatureColumn& c) {
    out.push_back(c[0] / kLongitudinalScale);
    out.push_back(c[1] / kLateralScale);
    out.push_back(c[2] / kSpeedScale);
    out.push_back(c[3] / kLateralSpeedScale);
    out.push_back(c[4]);
    out.push_back(c[5]);
  };
  push_block(obs.ego);
  for (const auto& col : obs.neighbors) push_block(col);
  return out;
}

std::string_view to_string(FusionMode m) {
  return m == FusionMode::Attention ? "attention" : "student_only";
}

std::uint64_t arch_hash(const NetConfig& c) {
  std::ostringstream os;
  os << "fusion-policy/v2 in=" << c.input_dim << " hidden=" << c.hidden << " heads=" << c.heads
     << " actions=" << kActions << " fusion=" << to_string(c.fusion) << " act=tanh";
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

FusionPolicyNet::FusionPolicyNet(NetConfig config, std::uint64_t seed) : config_(config) {
  if (config_.input_dim == 0 || config_.hidden == 0) throw ConfigError("policy", "dimensions must be positive");
  if (config_.fusion == FusionMode::Attention && config_.heads == 0) {
    throw ConfigError("policy.heads", "attention fusion needs at least one head");
  }
  std::mt19937_64 rng(seed);
  const auto in = config_.input_dim, d = config_.hidden;
  params_.add_weight("f_s.w1", in, d, rng);
  params_.add_bias("f_s.b1", d);
  params_.add_weight("f_s.w2", d, d, rng);
  params_.add_bias("f_s.b2", d);
  if (has_teacher_path()) {
    params_.add_weight("f_t.w1", in, d, rng);
    params_.add_bias("f_t.b1", d);
    params_.add_weight("f_t.w2", d, d, rng);
    params_.add_bias("f_t.b2", d);
    params_.add_weight("teacher.w_p", d, kActions, rng);
    params_.add_bias("teacher.b_p", kActions);
    params_.add_weight("teacher.w_q", d, kActions, rng);
    params_.add_bias("teacher.b_q", kActions);
    for (std::size_t h = 0; h < config_.heads; ++h) {
      const auto p = "attn.h" + std::to_string(h) + ".";
      params_.add_weight(p + "w_q", d, d, rng);
      params_.add_weight(p + "w_k", d, d, rng);
      params_.add_weight(p + "w_v", d, d, rng);
    }
    params_.add_weight("attn.w_o", d * config_.heads, d, rng);
  }
  params_.add_weight("head.w_pi", d, kActions, rng);
  params_.add_bias("head.b_pi", kActions);
  params_.add_weight("head.w_q", d, kActions, rng);
  params_.add_bias("head.b_q", kActions);
  params_.add_weight("head.w_v", d, 1, rng);
  params_.add_bias("head.b_v", 1);
}

ForwardPass FusionPolicyNet::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != config_.input_dim) {
    throw ShapeError("policy forward: expected [B, " + std::to_string(config_.input_dim) + "], got " +
                     tensor::shape_str(x.shape()));
  }
  const auto& P = params_;
  auto encoder = [&](const std::string& p) {
    auto h1 = ops::tanh(ops::add_bias(ops::matmul(x, P.get(p + ".w1")), P.get(p + ".b1")));
    return ops::tanh(ops::add_bias(ops::matmul(h1, P.get(p + ".w2")), P.get(p + ".b2")));
  };
  ForwardPass out;
  out.h_s = encoder("f_s");
  if (has_teacher_path()) {
    out.h_t = encoder("f_t");
    out.teacher_log_pi = ops::log_softmax(ops::add_bias(ops::matmul(out.h_t, P.get("teacher.w_p")), P.get("teacher.b_p")));
    out.teacher_pi = ops::exp(out.teacher_log_pi);
    out.teacher_q = ops::add_bias(ops::matmul(out.h_t, P.get("teacher.w_q")), P.get("teacher.b_q"));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.hidden));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      const auto p = "attn.h" + std::to_string(h) + ".";
      auto q = ops::matmul(out.h_s, P.get(p + "w_q"));
      auto k = ops::matmul(out.h_t, P.get(p + "w_k"));
      auto v = ops::matmul(out.h_t, P.get(p + "w_v"));
      auto alpha = ops::softmax(ops::outer(q, k, inv_sqrt_d));
      heads.push_back(ops::batched_matvec(alpha, v));
      out.attention.push_back(std::move(alpha));
    }
    auto fused = heads.size() == 1 ? heads.front() : ops::concat(heads);
    out.h = ops::add(ops::matmul(fused, P.get("attn.w_o")), out.h_s);
  } else {
    out.h = out.h_s;
  }
  out.logits = ops::add_bias(ops::matmul(out.h, P.get("head.w_pi")), P.get("head.b_pi"));
  out.log_pi = ops::log_softmax(out.logits);
  out.pi = ops::softmax(out.logits);
  out.q = ops::add_bias(ops::matmul(out.h, P.get("head.w_q")), P.get("head.b_q"));
  out.v = ops::add_bias(ops::matmul(out.h, P.get("head.w_v")), P.get("head.b_v"));
  return out;
}

PolicyOutput FusionPolicyNet::forward(std::span<const double> x) const {
  tensor::NoGradGuard no_grad;
  const auto pass = forward(Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end())));
  PolicyOutput out;
  for (std::size_t a = 0; a < kActions; ++a) {
    out.pi[a] = pass.pi.at(a);
    out.q_values[a] = pass.q.at(a);
    if (has_teacher_path()) {
      out.teacher_pi_hat[a] = pass.teacher_pi.at(a);
      out.teacher_q_hat[a] = pass.teacher_q.at(a);
    }
  }
  out.v = pass.v.item();
  for (const auto& alpha : pass.attention) out.attention.emplace_back(alpha.data().begin(), alpha.data().end());
  return out;
}

Tensor make_batch(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw UsageError("make_batch: no rows");
  const auto width = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) throw ShapeError("make_batch: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), width}, std::move(data));
}

std::size_t argmax(const ActionArray& values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace telldrive::policy
