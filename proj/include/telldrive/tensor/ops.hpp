#pragma once

#include <span>
#include <vector>

#include "telldrive/tensor/tensor.hpp"

namespace telldrive::tensor {

// All ops throw ShapeError naming both shapes on mismatch. Batches are rows:
// a 2-D tensor [rows, features]; attention weights are 3-D [rows, d, d].

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m,n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
/// Gradient passes only where lo < a < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// Concatenate 2-D tensors with equal row counts along columns.
Tensor concat(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [m,n] -> [m]
Tensor sum_rows(const Tensor& a);
/// [m,n], one column index per row -> [m]
Tensor pick(const Tensor& a, std::span<const int> columns);
/// Select a subset of rows of a 2-D tensor (or elements of a 1-D tensor).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

/// Row-wise outer product: out[b,i,j] = factor * q[b,i] * k[b,j].
Tensor outer(const Tensor& q, const Tensor& k, double factor);
/// Row-wise matrix-vector product: out[b,i] = sum_j w[b,i,j] * v[b,j].
Tensor batched_matvec(const Tensor& w, const Tensor& v);

}  // namespace telldrive::tensor
