// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with reverse-mode automatic differentiation on an
// explicit tape. Every trainable operation in the library is built from the
// primitives here. GEMM-shaped inner loops (matmul, conv2d via im2col) are
// dispatched to BLAS; all backward rules are implemented in this file.

#pragma once

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <cblas.h>

#include "contourgraph/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace cg {

namespace detail {

// Single-threaded BLAS keeps checkpoint bytes reproducible run to run.
inline void pin_blas_threads() {
  static const int once = (openblas_set_num_threads(1), 0);
  (void)once;
}

inline std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

struct TensorNode {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::vector<double>& grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 double alpha, const double* a, std::int64_t lda, const double* b,
                 std::int64_t ldb, double beta, double* c, std::int64_t ldc) {
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor: shared-handle over a dense float64 buffer
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<std::size_t>(detail::numel_of(n->shape)), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from_data(std::vector<double> data, std::vector<std::int64_t> shape,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != detail::numel_of(shape))
      throw ShapeError("from_data: " + std::to_string(data.size()) +
                       " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({v}, {}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; zeros are materialized on first access.
  std::vector<double>& grad() { return node_->grad_buf(); }
  double grad_at(std::int64_t i) const {
    return node_->grad.empty() ? 0.0 : node_->grad[static_cast<std::size_t>(i)];
  }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
  }

  double& at(std::initializer_list<std::int64_t> idx) {
    return node_->data[static_cast<std::size_t>(flat_index(idx))];
  }
  double at(std::initializer_list<std::int64_t> idx) const {
    return node_->data[static_cast<std::size_t>(flat_index(idx))];
  }

  Tensor clone() const {
    Tensor t = from_data(node_->data, node_->shape, node_->requires_grad);
    return t;
  }

  detail::NodePtr node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != node_->shape.size())
      throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
      flat = flat * node_->shape[k] + i;
      ++k;
    }
    return flat;
  }

  detail::NodePtr node_;
};

inline void debug_check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in forward output");
#endif
  (void)t;
  (void)op;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class TapeScope;

// Ordered log of backward closures. Ops record themselves onto the active
// tape (thread-local); backward replays in exact reverse order. A tape must
// not be shared across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape backwards. Gradients
  // accumulate additively into every recorded input.
  void backward(Tensor loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  static Tape* active() { return tls(); }

 private:
  friend class TapeScope;
  static Tape*& tls() {
    thread_local Tape* t = nullptr;
    return t;
  }
  std::vector<std::function<void()>> ops_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::tls()) { Tape::tls() = &t; }
  ~TapeScope() { Tape::tls() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Marks y as a recorded intermediate and pushes its backward closure.
inline void record_op(Tensor& y, std::function<void()> fn) {
  y.set_requires_grad(true);
  Tape::active()->record(std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool row_broadcast = b.rank() == 1 && a.rank() >= 1 && a.shape() != b.shape() &&
                             a.dim(a.rank() - 1) == b.dim(0);
  if (!row_broadcast && a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const std::int64_t n = a.numel();
  if (row_broadcast) {
    const std::int64_t w = b.numel();
    for (std::int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i % w];
  } else {
    for (std::int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i];
  }
  if (detail::should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record_op(y, [an, bn, yn, row_broadcast] {
      if (yn->grad.empty()) return;
      const std::int64_t n = static_cast<std::int64_t>(yn->data.size());
      if (an->requires_grad) {
        auto& ga = an->grad_buf();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buf();
        if (row_broadcast) {
          const std::int64_t w = static_cast<std::int64_t>(bn->data.size());
          for (std::int64_t i = 0; i < n; ++i) gb[i % w] += yn->grad[i];
        } else {
          for (std::int64_t i = 0; i < n; ++i) gb[i] += yn->grad[i];
        }
      }
    });
  }
  debug_check_finite(y, "add");
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] - b.data()[i];
  if (detail::should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record_op(y, [an, bn, yn] {
      if (yn->grad.empty()) return;
      const std::int64_t n = static_cast<std::int64_t>(yn->data.size());
      if (an->requires_grad) {
        auto& ga = an->grad_buf();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buf();
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= yn->grad[i];
      }
    });
  }
  debug_check_finite(y, "sub");
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (detail::should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record_op(y, [an, bn, yn] {
      if (yn->grad.empty()) return;
      const std::int64_t n = static_cast<std::int64_t>(yn->data.size());
      if (an->requires_grad) {
        auto& ga = an->grad_buf();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += yn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buf();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += yn->grad[i] * an->data[i];
      }
    });
  }
  debug_check_finite(y, "mul");
  return y;
}

inline Tensor add(const Tensor& a, double c) {
  Tensor y = Tensor::zeros(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] + c;
  if (detail::should_record({&a})) {
    auto an = a.node(), yn = y.node();
    detail::record_op(y, [an, yn] {
      if (yn->grad.empty() || !an->requires_grad) return;
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) ga[i] += yn->grad[i];
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, double c) {
  Tensor y = Tensor::zeros(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] * c;
  if (detail::should_record({&a})) {
    auto an = a.node(), yn = y.node();
    detail::record_op(y, [an, yn, c] {
      if (yn->grad.empty() || !an->requires_grad) return;
      auto& ga = an->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) ga[i] += c * yn->grad[i];
    });
  }
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i)
        if (xn->data[i] > 0.0) gx[i] += yn->grad[i];
    });
  }
  return y;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        const double s = yn->data[i];
        gx[i] += yn->grad[i] * s * (1.0 - s);
      }
    });
  }
  debug_check_finite(y, "sigmoid");
  return y;
}

inline Tensor exp(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y.data()[i] = std::exp(x.data()[i]);
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) gx[i] += yn->grad[i] * yn->data[i];
    });
  }
  debug_check_finite(y, "exp");
  return y;
}

inline Tensor log(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y.data()[i] = std::log(x.data()[i]);
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) gx[i] += yn->grad[i] / xn->data[i];
    });
  }
  debug_check_finite(y, "log");
  return y;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      const double g = yn->grad[0];
      for (double& v : gx) v += g;
    });
  }
  debug_check_finite(y, "sum");
  return y;
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  Tensor y = Tensor::scalar(s * inv_n);
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn, inv_n] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      const double g = yn->grad[0] * inv_n;
      for (double& v : gx) v += g;
    });
  }
  debug_check_finite(y, "mean");
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<std::int64_t> new_shape) {
  if (detail::numel_of(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor y = Tensor::from_data(x.data(), std::move(new_shape));
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) gx[i] += yn->grad[i];
    });
  }
  return y;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  std::vector<std::int64_t> out_shape = parts[0].shape();
  std::int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  Tensor y = Tensor::zeros(out_shape);
  std::int64_t offset = 0;  // in axis units
  for (const Tensor& p : parts) {
    const std::int64_t pa = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * pa * inner, pa * inner,
                  y.data().begin() + (o * axis_total + offset) * inner);
    offset += pa;
  }

  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  if (Tape::active() != nullptr && any_grad) {
    std::vector<detail::NodePtr> in_nodes;
    std::vector<std::int64_t> axis_dims;
    in_nodes.reserve(parts.size());
    for (const Tensor& p : parts) {
      in_nodes.push_back(p.node());
      axis_dims.push_back(p.dim(axis));
    }
    auto yn = y.node();
    detail::record_op(y, [in_nodes, axis_dims, yn, outer, inner, axis_total] {
      if (yn->grad.empty()) return;
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < in_nodes.size(); ++k) {
        const std::int64_t pa = axis_dims[k];
        if (in_nodes[k]->requires_grad) {
          auto& g = in_nodes[k]->grad_buf();
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = yn->grad.data() + (o * axis_total + offset) * inner;
            double* dst = g.data() + o * pa * inner;
            for (std::int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
          }
        }
        offset += pa;
      }
    });
  }
  return y;
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for axis size " + std::to_string(x.dim(axis)));
  std::vector<std::int64_t> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
  const std::int64_t ax = x.dim(axis);

  Tensor y = Tensor::zeros(out_shape);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data().begin() + (o * ax + start) * inner, len * inner,
                y.data().begin() + o * len * inner);

  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn, outer, inner, ax, start, len] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = yn->grad.data() + o * len * inner;
        double* dst = gx.data() + (o * ax + start) * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor y = Tensor::zeros({m, n});
  detail::gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0,
               y.data().data(), n);
  if (detail::should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record_op(y, [an, bn, yn, m, n, k] {
      if (yn->grad.empty()) return;
      if (an->requires_grad)  // dA = dY * B^T
        detail::gemm(false, true, m, k, n, 1.0, yn->grad.data(), n, bn->data.data(), n, 1.0,
                     an->grad_buf().data(), k);
      if (bn->requires_grad)  // dB = A^T * dY
        detail::gemm(true, false, k, n, m, 1.0, an->data.data(), k, yn->grad.data(), n, 1.0,
                     bn->grad_buf().data(), n);
    });
  }
  debug_check_finite(y, "matmul");
  return y;
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM), nearest upsample, maxpool
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, std::int64_t ci, std::int64_t h, std::int64_t w,
                   std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                   std::int64_t oh, std::int64_t ow, double* cols) {
  // cols is [ci*kh*kw, oh*ow] row-major
  const std::int64_t m = oh * ow;
  for (std::int64_t c = 0; c < ci; ++c) {
    for (std::int64_t r = 0; r < kh; ++r) {
      for (std::int64_t s = 0; s < kw; ++s) {
        double* row = cols + ((c * kh + r) * kw + s) * m;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride + r - pad;
          if (iy < 0 || iy >= h) {
            std::fill_n(row + oy * ow, ow, 0.0);
            continue;
          }
          const double* src = x + (c * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride + s - pad;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, std::int64_t ci, std::int64_t h, std::int64_t w,
                       std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                       std::int64_t oh, std::int64_t ow, double* x) {
  const std::int64_t m = oh * ow;
  for (std::int64_t c = 0; c < ci; ++c) {
    for (std::int64_t r = 0; r < kh; ++r) {
      for (std::int64_t s = 0; s < kw; ++s) {
        const double* row = cols + ((c * kh + r) * kw + s) * m;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride + r - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (c * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride + s - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co]. Zero padding, stride 1 or 2.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1,
                     int pad = 0) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d: expects x [Ci,H,W] and w [Co,Ci,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw ValueError("conv2d: stride must be 1 or 2");
  if (pad < 0) throw ValueError("conv2d: negative padding");
  const std::int64_t ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const std::int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) + " != kernel channels " +
                     std::to_string(w.dim(1)));
  if (b.rank() != 1 || b.dim(0) != co)
    throw ShapeError("conv2d: bias must be [Co]=" + std::to_string(co) + ", got " +
                     shape_str(b.shape()));
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (ww + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const std::int64_t k = ci * kh * kw, m = oh * ow;
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(k * m));
  detail::im2col(x.data().data(), ci, h, ww, kh, kw, stride, pad, oh, ow, cols->data());

  Tensor y = Tensor::zeros({co, oh, ow});
  detail::gemm(false, false, co, m, k, 1.0, w.data().data(), k, cols->data(), m, 0.0,
               y.data().data(), m);
  for (std::int64_t c = 0; c < co; ++c) {
    const double bias = b.data()[c];
    double* row = y.data().data() + c * m;
    for (std::int64_t i = 0; i < m; ++i) row[i] += bias;
  }

  if (detail::should_record({&x, &w, &b})) {
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    const int s = stride, p = pad;
    detail::record_op(y, [xn, wn, bn, yn, cols, ci, h, ww, co, kh, kw, s, p, oh, ow, k, m] {
      if (yn->grad.empty()) return;
      if (bn->requires_grad) {
        auto& gb = bn->grad_buf();
        for (std::int64_t c = 0; c < co; ++c) {
          double acc = 0.0;
          const double* row = yn->grad.data() + c * m;
          for (std::int64_t i = 0; i < m; ++i) acc += row[i];
          gb[c] += acc;
        }
      }
      if (wn->requires_grad)  // dW = dY * cols^T
        detail::gemm(false, true, co, k, m, 1.0, yn->grad.data(), m, cols->data(), m, 1.0,
                     wn->grad_buf().data(), k);
      if (xn->requires_grad) {  // dcols = W^T * dY, then scatter
        std::vector<double> dcols(static_cast<std::size_t>(k * m));
        detail::gemm(true, false, k, m, co, 1.0, wn->data.data(), k, yn->grad.data(), m, 0.0,
                     dcols.data(), m);
        detail::col2im_add(dcols.data(), ci, h, ww, kh, kw, s, p, oh, ow, xn->grad_buf().data());
      }
    });
  }
  debug_check_finite(y, "conv2d");
  return y;
}

inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest2x: expects [C,H,W], got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y = Tensor::zeros({c, 2 * h, 2 * w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < 2 * h; ++i) {
      const double* src = x.data().data() + (ch * h + i / 2) * w;
      double* dst = y.data().data() + (ch * 2 * h + i) * 2 * w;
      for (std::int64_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
    }
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn, c, h, w] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < 2 * h; ++i) {
          const double* src = yn->grad.data() + (ch * 2 * h + i) * 2 * w;
          double* dst = gx.data() + (ch * h + i / 2) * w;
          for (std::int64_t j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
        }
    });
  }
  return y;
}

inline Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("maxpool2x2: expects [C,H,W], got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2x2: H and W must be even");
  const std::int64_t oh = h / 2, ow = w / 2;
  Tensor y = Tensor::zeros({c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c * oh * ow));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        // ties go to the first maximal element in row-major window order
        std::int64_t best = (ch * h + 2 * i) * w + 2 * j;
        double bv = x.data()[best];
        const std::int64_t cand[3] = {(ch * h + 2 * i) * w + 2 * j + 1,
                                      (ch * h + 2 * i + 1) * w + 2 * j,
                                      (ch * h + 2 * i + 1) * w + 2 * j + 1};
        for (std::int64_t idx : cand)
          if (x.data()[idx] > bv) {
            bv = x.data()[idx];
            best = idx;
          }
        y.data()[(ch * oh + i) * ow + j] = bv;
        (*argmax)[static_cast<std::size_t>((ch * oh + i) * ow + j)] = best;
      }
  if (detail::should_record({&x})) {
    auto xn = x.node(), yn = y.node();
    detail::record_op(y, [xn, yn, argmax] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto& gx = xn->grad_buf();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) gx[(*argmax)[i]] += yn->grad[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

// logits/onehot are [C] or [C, M] (classes down axis 0); returns the mean
// per-column cross-entropy. Log-sum-exp stabilized.
inline Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot) {
  if (logits.shape() != onehot.shape())
    throw ShapeError("softmax_cross_entropy: shape mismatch " + shape_str(logits.shape()) +
                     " vs " + shape_str(onehot.shape()));
  if (logits.rank() < 1) throw ShapeError("softmax_cross_entropy: rank-0 input");
  const std::int64_t c = logits.dim(0);
  const std::int64_t m = logits.numel() / c;
  auto probs = std::make_shared<std::vector<double>>(logits.data().size());
  double loss = 0.0;
  for (std::int64_t col = 0; col < m; ++col) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t r = 0; r < c; ++r) mx = std::max(mx, logits.data()[r * m + col]);
    double z = 0.0;
    for (std::int64_t r = 0; r < c; ++r) z += std::exp(logits.data()[r * m + col] - mx);
    const double logz = std::log(z) + mx;
    for (std::int64_t r = 0; r < c; ++r) {
      const double lp = logits.data()[r * m + col] - logz;
      (*probs)[static_cast<std::size_t>(r * m + col)] = std::exp(lp);
      loss -= onehot.data()[r * m + col] * lp;
    }
  }
  Tensor y = Tensor::scalar(loss / static_cast<double>(m));
  if (detail::should_record({&logits, &onehot})) {
    auto ln = logits.node(), on = onehot.node(), yn = y.node();
    detail::record_op(y, [ln, on, yn, probs, c, m] {
      if (yn->grad.empty() || !ln->requires_grad) return;
      auto& gl = ln->grad_buf();
      const double g = yn->grad[0] / static_cast<double>(m);
      for (std::int64_t col = 0; col < m; ++col)
        for (std::int64_t r = 0; r < c; ++r) {
          const std::int64_t i = r * m + col;
          gl[i] += g * ((*probs)[static_cast<std::size_t>(i)] - on->data[i]);
        }
    });
  }
  debug_check_finite(y, "softmax_cross_entropy");
  return y;
}

// ---------------------------------------------------------------------------
// primitive_forward: string-keyed dispatcher over the op set
// ---------------------------------------------------------------------------

enum class OpKind {
  add,
  sub,
  mul,
  matmul,
  conv2d,
  upsample_nearest2x,
  maxpool2x2,
  relu,
  sigmoid,
  exp,
  log,
  mean,
  sum,
  concat,
  reshape,
  slice,
  softmax_cross_entropy,
};

inline OpKind parse_op_kind(std::string_view name) {
  static const std::map<std::string_view, OpKind> table = {
      {"add", OpKind::add},
      {"sub", OpKind::sub},
      {"mul", OpKind::mul},
      {"matmul", OpKind::matmul},
      {"conv2d", OpKind::conv2d},
      {"upsample_nearest2x", OpKind::upsample_nearest2x},
      {"maxpool2x2", OpKind::maxpool2x2},
      {"relu", OpKind::relu},
      {"sigmoid", OpKind::sigmoid},
      {"exp", OpKind::exp},
      {"log", OpKind::log},
      {"mean", OpKind::mean},
      {"sum", OpKind::sum},
      {"concat", OpKind::concat},
      {"reshape", OpKind::reshape},
      {"slice", OpKind::slice},
      {"softmax_cross_entropy", OpKind::softmax_cross_entropy},
  };
  auto it = table.find(name);
  if (it == table.end()) throw ValueError("unknown op_kind: '" + std::string(name) + "'");
  return it->second;
}

struct OpAttrs {
  int axis = 0;
  int stride = 1;
  int pad = 0;
  std::vector<std::int64_t> shape;  // reshape target
  std::int64_t start = 0, len = 0;  // slice range
};

inline Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs,
                                const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw ShapeError("primitive_forward: expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::conv2d: need(3); return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride, attrs.pad);
    case OpKind::upsample_nearest2x: need(1); return upsample_nearest2x(inputs[0]);
    case OpKind::maxpool2x2: need(1); return maxpool2x2(inputs[0]);
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::exp: need(1); return exp(inputs[0]);
    case OpKind::log: need(1); return log(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::reshape: need(1); return reshape(inputs[0], attrs.shape);
    case OpKind::slice: need(1); return slice(inputs[0], attrs.axis, attrs.start, attrs.len);
    case OpKind::softmax_cross_entropy: need(2); return softmax_cross_entropy(inputs[0], inputs[1]);
  }
  throw ValueError("unknown op_kind");
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool pass = false;
  bool evaluable = true;  // false when f produced a non-finite value
  std::string message;
};

// Compares the tape gradient of a scalar-valued f against central finite
// differences at x. Non-finite evaluations are reported as failures.
inline GradCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x0, double step, double tol) {
  GradCheckResult res;
  Tensor x = x0.clone();
  x.set_requires_grad(true);

  std::vector<double> analytic;
  try {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(x);
    if (y.numel() != 1) throw ConfigError("gradient_check: f must be scalar-valued");
    if (!std::isfinite(y.item())) {
      res.evaluable = false;
      res.message = "f(x) is non-finite";
      return res;
    }
    tape.backward(y);
    analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);
    for (std::int64_t i = 0; i < x.numel(); ++i) analytic[static_cast<std::size_t>(i)] = x.grad_at(i);
  } catch (const NumericError& e) {
    res.evaluable = false;
    res.message = e.what();
    return res;
  }

  x.set_requires_grad(false);  // finite-difference passes record nothing
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    double fp, fm;
    try {
      x.data()[i] = v + step;
      fp = f(x).item();
      x.data()[i] = v - step;
      fm = f(x).item();
    } catch (const NumericError& e) {
      x.data()[i] = v;
      res.evaluable = false;
      res.message = e.what();
      return res;
    }
    x.data()[i] = v;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      res.evaluable = false;
      res.message = "finite-difference evaluation is non-finite";
      return res;
    }
    const double fd = (fp - fm) / (2.0 * step);
    const double an = analytic[static_cast<std::size_t>(i)];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  res.pass = res.evaluable && res.max_rel_err <= tol;
  return res;
}

// ---------------------------------------------------------------------------
// CGW1 checkpoint format
// ---------------------------------------------------------------------------

struct NamedParam {
  std::string name;
  Tensor value;
};

// Flat binary: magic "CGW1", then per parameter
//   u64 name length, name bytes, u64 rank, u64 dims..., f64 payload.
inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedParam>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write("CGW1", 4);
  for (const NamedParam& p : params) {
    write_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u64(os, static_cast<std::uint64_t>(p.value.rank()));
    for (std::int64_t d : p.value.shape()) write_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(p.value.data().data()),
             static_cast<std::streamsize>(p.value.data().size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<NamedParam> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CGW1", 4) != 0)
    throw IoError("corrupt checkpoint (bad magic): " + path.string());
  std::vector<NamedParam> out;
  while (true) {
    if (is.peek() == std::char_traits<char>::eof()) break;
    const std::uint64_t name_len = read_u64(is, "parameter name length in " + path.string());
    if (name_len > (1u << 20))
      throw IoError("corrupt checkpoint (absurd name length): " + path.string());
    std::string name(name_len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw IoError("corrupt checkpoint (truncated name): " + path.string());
    const std::uint64_t rank = read_u64(is, "rank of '" + name + "' in " + path.string());
    if (rank > 8) throw IoError("corrupt checkpoint (absurd rank): " + path.string());
    std::vector<std::int64_t> dims(rank);
    std::uint64_t count = 1;
    for (auto& d : dims) {
      d = static_cast<std::int64_t>(read_u64(is, "dims of '" + name + "' in " + path.string()));
      if (d <= 0 || count > (1ull << 32) / std::max<std::uint64_t>(1, static_cast<std::uint64_t>(d)))
        throw IoError("corrupt checkpoint (absurd dims): " + path.string());
      count *= static_cast<std::uint64_t>(d);
    }
    std::vector<double> payload(count);
    if (!is.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(count * sizeof(double))))
      throw IoError("corrupt checkpoint (truncated payload of '" + name + "'): " + path.string());
    out.push_back({std::move(name), Tensor::from_data(std::move(payload), std::move(dims))});
  }
  return out;
}

}  // namespace cg
