#include "telldrive/tensor/ops.hpp"

#include <algorithm>
#include <cmath>

#include "telldrive/errors.hpp"

namespace telldrive::tensor {
namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
}

/// Builds an output node; records parents and the backward closure only when
/// some parent is tracked.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> fn) {
  Tensor out(std::move(shape), std::move(data));
  bool tracked = false;
  if (grad_enabled())
    for (const auto& p : parents) tracked = tracked || p.requires_grad() || p.node()->backward_fn;
  if (tracked) {
    auto& node = *out.node();
    node.requires_grad = false;
    for (auto& p : parents) node.parents.push_back(p.node());
    node.backward_fn = std::move(fn);
  }
  return out;
}

/// A parent participates in backward if it is a tracked leaf or an interior node.
bool wants_grad(const NodePtr& n) { return n->requires_grad || static_cast<bool>(n->backward_fn); }

std::vector<double>& grad_of(const NodePtr& n) {
  n->ensure_grad();
  return n->grad;
}

template <typename F, typename G>
Tensor unary(const Tensor& a, F forward, G derivative) {
  std::vector<double> out(a.size());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result(a.shape(), std::move(out), {a}, [derivative](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * derivative(p->data[i], self.data[i]);
    }
  });
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch(op, a, b);
}

std::size_t last_dim(const char* op, const Tensor& a) {
  if (a.rank() == 0 || a.size() == 0) {
    throw ShapeError(std::string(op) + ": empty tensor " + shape_str(a.shape()));
  }
  return a.shape().back();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) mismatch("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double* G = self.grad.data();
    if (wants_grad(pa)) {
      // dA = G B^T
      auto& ga = grad_of(pa);
      const double* Bd = pb->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = Bd + p * n;
          const double* grow = G + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (wants_grad(pb)) {
      // dB = A^T G
      auto& gb = grad_of(pb);
      const double* Ad = pa->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Ad[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1)) mismatch("add_bias", a, bias);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return make_result(a.shape(), std::move(out), {a, bias}, [m, n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants_grad(pa)) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

namespace {
template <typename F, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_same(name, a, b);
  std::vector<double> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [da, db](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants_grad(pa)) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * da(pa->data[i], pb->data[i]);
    }
    if (wants_grad(pb)) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * db(pa->data[i], pb->data[i]);
    }
  });
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

// Ties route the gradient to the first operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a) {
  const std::size_t n = last_dim("softmax", a);
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * n;
    double* y = out.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, n](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t n = last_dim("log_softmax", a);
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, n](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += gy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) mismatch("concat", parts[0], p);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  return make_result({rows, total}, std::move(out), parts, [rows, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      if (wants_grad(p)) {
        auto& g = grad_of(p);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j)
            g[r * widths[k] + j] += self.grad[r * total + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({1}, {total}, {a}, [](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("sum_rows: expected 2-D, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m, 0.0);
  auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += in[i * n + j];
  return make_result({m}, std::move(out), {a}, [m, n](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
  });
}

Tensor pick(const Tensor& a, std::span<const int> columns) {
  if (a.rank() != 2 || columns.size() != a.dim(0)) {
    throw ShapeError("pick: shape " + shape_str(a.shape()) + " with " +
                     std::to_string(columns.size()) + " indices");
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<std::size_t> idx(m);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (columns[i] < 0 || static_cast<std::size_t>(columns[i]) >= n) {
      throw ShapeError("pick: column " + std::to_string(columns[i]) + " out of range for " +
                       shape_str(a.shape()));
    }
    idx[i] = i * n + static_cast<std::size_t>(columns[i]);
    out[i] = a.data()[idx[i]];
  }
  return make_result({m}, std::move(out), {a}, [idx](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() != 1 && a.rank() != 2) {
    throw ShapeError("gather_rows: expected 1-D or 2-D, got " + shape_str(a.shape()));
  }
  const std::size_t width = a.rank() == 2 ? a.dim(1) : 1;
  std::vector<double> out(rows.size() * width);
  auto in = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(in.data() + rows[i] * width, width, out.data() + i * width);
  }
  Shape shape = a.rank() == 2 ? Shape{rows.size(), width} : Shape{rows.size()};
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {a}, [idx, width](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) g[idx[i] * width + j] += self.grad[i * width + j];
  });
}

Tensor outer(const Tensor& q, const Tensor& k, double factor) {
  if (q.rank() != 2 || q.shape() != k.shape()) mismatch("outer", q, k);
  const std::size_t b = q.dim(0), d = q.dim(1);
  std::vector<double> out(b * d * d);
  auto Q = q.data();
  auto K = k.data();
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      const double qi = factor * Q[r * d + i];
      double* row = out.data() + (r * d + i) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = qi * K[r * d + j];
    }
  return make_result({b, d, d}, std::move(out), {q, k}, [b, d, factor](Node& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    const bool gq = wants_grad(pq), gk = wants_grad(pk);
    std::vector<double>* GQ = gq ? &grad_of(pq) : nullptr;
    std::vector<double>* GK = gk ? &grad_of(pk) : nullptr;
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < d; ++i) {
        const double* grow = self.grad.data() + (r * d + i) * d;
        if (gq) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += grow[j] * pk->data[r * d + j];
          (*GQ)[r * d + i] += factor * acc;
        }
        if (gk) {
          const double qi = factor * pq->data[r * d + i];
          double* gkrow = GK->data() + r * d;
          for (std::size_t j = 0; j < d; ++j) gkrow[j] += grow[j] * qi;
        }
      }
  });
}

Tensor batched_matvec(const Tensor& w, const Tensor& v) {
  if (w.rank() != 3 || v.rank() != 2 || w.dim(0) != v.dim(0) || w.dim(2) != v.dim(1)) {
    mismatch("batched_matvec", w, v);
  }
  const std::size_t b = w.dim(0), m = w.dim(1), n = w.dim(2);
  std::vector<double> out(b * m, 0.0);
  auto W = w.data();
  auto V = v.data();
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < m; ++i) {
      const double* wrow = W.data() + (r * m + i) * n;
      const double* vrow = V.data() + r * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * vrow[j];
      out[r * m + i] = acc;
    }
  return make_result({b, m}, std::move(out), {w, v}, [b, m, n](Node& self) {
    auto& pw = self.parents[0];
    auto& pv = self.parents[1];
    const bool gw = wants_grad(pw), gv = wants_grad(pv);
    std::vector<double>* GW = gw ? &grad_of(pw) : nullptr;
    std::vector<double>* GV = gv ? &grad_of(pv) : nullptr;
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = self.grad[r * m + i];
        if (gi == 0.0) continue;
        if (gw) {
          double* gwrow = GW->data() + (r * m + i) * n;
          const double* vrow = pv->data.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) gwrow[j] += gi * vrow[j];
        }
        if (gv) {
          const double* wrow = pw->data.data() + (r * m + i) * n;
          double* gvrow = GV->data() + r * n;
          for (std::size_t j = 0; j < n; ++j) gvrow[j] += gi * wrow[j];
        }
      }
  });
}

}  // namespace telldrive::tensor
