#pragma once

// Central finite-difference oracle for gradient checks. Lives in test code only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "telldrive/tensor/param_store.hpp"
#include "telldrive/tensor/tensor.hpp"

namespace telldrive::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning rounding noise into huge relative errors.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the accumulated gradient of each tensor in `inputs` with central
/// differences of `loss_fn`. `loss_fn` must rebuild the graph on every call.
/// At most `max_per_tensor` coordinates per tensor are probed (evenly strided).
inline GradCheck check_gradients(const std::function<tensor::Tensor()>& loss_fn,
                                 std::vector<tensor::Tensor> inputs, double h = 1e-5,
                                 std::size_t max_per_tensor = 64) {
  for (auto& t : inputs) t.zero_grad();
  const auto loss = loss_fn();
  tensor::backward(loss);
  // Central differences carry rounding noise of about eps * |L| / h, so the
  // floor grows with the loss magnitude.
  const double floor = 1e-6 * std::max(1.0, std::abs(loss.item()));
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheck result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data();
    const std::size_t stride = std::max<std::size_t>(1, data.size() / max_per_tensor);
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[k][i], numeric, floor));
      ++result.checked;
    }
  }
  return result;
}

inline std::vector<tensor::Tensor> all_params(tensor::ParamStore& store) {
  std::vector<tensor::Tensor> out;
  for (auto& e : store.entries()) out.push_back(e.value);
  return out;
}

}  // namespace telldrive::testing
