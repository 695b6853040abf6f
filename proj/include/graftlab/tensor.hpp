#pragma once

// Dense float64 tensors and a reverse-mode autodiff tape.
//
// A Tape records every operation eagerly as it is applied to Vars. Values are
// computed at construction time; backward() walks the tape in reverse once.
// Parameters can be borrowed into a tape without copying (Tape::param), in
// which case the caller keeps the Tensor alive for the tape's lifetime.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "graftlab/error.hpp"

namespace graftlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been attached

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw DimensionError("tensor of shape " + to_string(shape) + " given " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor filled(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool empty() const { return data.empty(); }
  bool has_grad() const { return !grad.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  std::span<const double> values() const { return data; }
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Stride>;
using MutStridedMap = Eigen::Map<RowMat, 0, Stride>;

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

}  // namespace detail

namespace kernels {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  double inner = kGeluC * (x + 0.044715 * x * x * x);
  double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Row-wise normalization over the last dimension d. gain/bias may be null for
// a plain (non-affine) normalization. mean/rstd receive per-row statistics
// when non-null.
inline void layer_norm(const double* x, const double* gain, const double* bias, double eps,
                       std::size_t rows, std::size_t d, double* out, double* mean = nullptr,
                       double* rstd = nullptr) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    double rs = 1.0 / std::sqrt(var + eps);
    double* o = out + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      double n = (xr[j] - mu) * rs;
      o[j] = n * (gain ? gain[j] : 1.0) + (bias ? bias[j] : 0.0);
    }
    if (mean) mean[r] = mu;
    if (rstd) rstd[r] = rs;
  }
}

// In-place softmax over a row of length n, stabilized by the row max.
inline void softmax_row(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}

}  // namespace kernels

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool attached() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;  // empty until backward reaches it
  double item() const;
  Tensor to_tensor() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A value that never receives a gradient.
  Var constant(Tensor t) { return push(std::move(t.shape), std::move(t.data), false); }

  // An owned leaf that accumulates a gradient.
  Var leaf(Tensor t) { return push(std::move(t.shape), std::move(t.data), true); }

  // A borrowed leaf: reads t.data in place. t must outlive the tape.
  Var param(const Tensor& t, bool requires_grad = true) {
    Node n;
    n.shape = t.shape;
    n.external = t.data.data();
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  void backward(Var loss) {
    if (loss.tape_ != this) throw TapeError("backward on a var from a detached or foreign tape");
    if (backward_done_) throw TapeError("backward called twice on the same tape");
    if (numel(nodes_[loss.id_].shape) != 1) {
      throw DimensionError("backward requires a scalar loss, got " +
                           to_string(nodes_[loss.id_].shape));
    }
    backward_done_ = true;
    if (!nodes_[loss.id_].requires_grad) return;
    grad_buffer(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  // ---- interface used by operations -------------------------------------
  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  const double* value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? n.external : n.owned.data();
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::span<const double> grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Zero-initialized on first access.
  std::span<double> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
    return n.grad;
  }

  Var emit(Shape shape, std::vector<double> value, bool requires_grad, const char* op) {
    detail::check_finite(value, op);
    if (backward_done_) throw TapeError("cannot record on a tape after backward");
    return push(std::move(shape), std::move(value), requires_grad);
  }

  void set_backward(Var v, std::function<void()> fn) { nodes_[v.id_].backward = std::move(fn); }

  void check_owner(std::initializer_list<Var> vars) const {
    for (const Var& v : vars) {
      if (v.tape_ != this) throw TapeError("operation mixes vars from different or detached tapes");
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> owned;
    const double* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(Shape shape, std::vector<double> value, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Shape& Var::shape() const {
  if (!tape_) throw TapeError("detached var");
  return tape_->shape_of(id_);
}
inline std::span<const double> Var::value() const {
  if (!tape_) throw TapeError("detached var");
  return {tape_->value_of(id_), numel(tape_->shape_of(id_))};
}
inline std::span<const double> Var::grad() const {
  if (!tape_) throw TapeError("detached var");
  return tape_->grad_of(id_);
}
inline double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar " + to_string(shape()));
  return v[0];
}
inline Tensor Var::to_tensor() const {
  auto v = value();
  Tensor t(shape(), std::vector<double>(v.begin(), v.end()));
  auto g = grad();
  t.grad.assign(g.begin(), g.end());
  return t;
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline Tape& owner(Var a) {
  if (!a.attached()) throw TapeError("operation on a detached var");
  return *a.tape();
}

inline void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.shape().size() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         to_string(v.shape()));
  }
}

// Number of rows when viewing a tensor as [rows x last_dim].
inline std::size_t leading(const Shape& s) {
  return s.empty() ? 1 : numel(s) / s.back();
}

inline void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// [m x k] * [k x n] -> [m x n]
inline Var matmul(Var a, Var b) {
  Tape& t = detail::owner(a);
  t.check_owner({a, b});
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " * " +
                         to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(t.value_of(a.id()), m, k) * detail::ConstMap(t.value_of(b.id()), k, n);
  bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Var y = t.emit({m, n}, std::move(out), rg, "matmul");
  if (rg) {
    t.set_backward(y, [&t, a, b, y, m, k, n] {
      detail::ConstMap dy(t.grad_of(y.id()).data(), m, n);
      if (t.requires_grad(a.id())) {
        detail::MutMap(t.grad_buffer(a.id()).data(), m, k).noalias() +=
            dy * detail::ConstMap(t.value_of(b.id()), k, n).transpose();
      }
      if (t.requires_grad(b.id())) {
        detail::MutMap(t.grad_buffer(b.id()).data(), k, n).noalias() +=
            detail::ConstMap(t.value_of(a.id()), m, k).transpose() * dy;
      }
    });
  }
  return y;
}

// [m x k] * [n x k]^T -> [m x n]
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::owner(a);
  t.check_owner({a, b});
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " * " +
                         to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(t.value_of(a.id()), m, k) *
      detail::ConstMap(t.value_of(b.id()), n, k).transpose();
  bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Var y = t.emit({m, n}, std::move(out), rg, "matmul_nt");
  if (rg) {
    t.set_backward(y, [&t, a, b, y, m, k, n] {
      detail::ConstMap dy(t.grad_of(y.id()).data(), m, n);
      if (t.requires_grad(a.id())) {
        detail::MutMap(t.grad_buffer(a.id()).data(), m, k).noalias() +=
            dy * detail::ConstMap(t.value_of(b.id()), n, k);
      }
      if (t.requires_grad(b.id())) {
        detail::MutMap(t.grad_buffer(b.id()).data(), n, k).noalias() +=
            dy.transpose() * detail::ConstMap(t.value_of(a.id()), m, k);
      }
    });
  }
  return y;
}

// Elementwise a + b, identical shapes.
inline Var add(Var a, Var b) {
  Tape& t = detail::owner(a);
  t.check_owner({a, b});
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Var y = t.emit(a.shape(), std::move(out), rg, "add");
  if (rg) {
    t.set_backward(y, [&t, a, b, y] {
      auto dy = t.grad_of(y.id());
      if (t.requires_grad(a.id())) detail::accumulate(t.grad_buffer(a.id()), dy);
      if (t.requires_grad(b.id())) detail::accumulate(t.grad_buffer(b.id()), dy);
    });
  }
  return y;
}

// x [.., n] + bias [n], broadcast over leading dimensions.
inline Var add_bias(Var x, Var bias) {
  Tape& t = detail::owner(x);
  t.check_owner({x, bias});
  detail::require_rank(bias, 1, "add_bias");
  const std::size_t n = bias.shape()[0];
  if (x.shape().empty() || x.shape().back() != n) {
    throw DimensionError("add_bias: " + to_string(x.shape()) + " + " + to_string(bias.shape()));
  }
  const std::size_t rows = detail::leading(x.shape());
  auto xv = x.value();
  auto bv = bias.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
  bool rg = t.requires_grad(x.id()) || t.requires_grad(bias.id());
  Var y = t.emit(x.shape(), std::move(out), rg, "add_bias");
  if (rg) {
    t.set_backward(y, [&t, x, bias, y, rows, n] {
      auto dy = t.grad_of(y.id());
      if (t.requires_grad(x.id())) detail::accumulate(t.grad_buffer(x.id()), dy);
      if (t.requires_grad(bias.id())) {
        auto db = t.grad_buffer(bias.id());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[r * n + j];
      }
    });
  }
  return y;
}

inline Var scale(Var a, double s) {
  Tape& t = detail::owner(a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  bool rg = t.requires_grad(a.id());
  Var y = t.emit(a.shape(), std::move(out), rg, "scale");
  if (rg) {
    t.set_backward(y, [&t, a, y, s] {
      auto dy = t.grad_of(y.id());
      auto da = t.grad_buffer(a.id());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * s;
    });
  }
  return y;
}

// Elementwise product, identical shapes.
inline Var mul(Var a, Var b) {
  Tape& t = detail::owner(a);
  t.check_owner({a, b});
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  bool rg = t.requires_grad(a.id()) || t.requires_grad(b.id());
  Var y = t.emit(a.shape(), std::move(out), rg, "mul");
  if (rg) {
    t.set_backward(y, [&t, a, b, y] {
      auto dy = t.grad_of(y.id());
      const double* av = t.value_of(a.id());
      const double* bv = t.value_of(b.id());
      if (t.requires_grad(a.id())) {
        auto da = t.grad_buffer(a.id());
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
      }
      if (t.requires_grad(b.id())) {
        auto db = t.grad_buffer(b.id());
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
      }
    });
  }
  return y;
}

// Sum of all elements -> scalar.
inline Var sum(Var a) {
  Tape& t = detail::owner(a);
  auto av = a.value();
  double s = 0.0;
  for (double v : av) s += v;
  bool rg = t.requires_grad(a.id());
  Var y = t.emit({}, {s}, rg, "sum");
  if (rg) {
    t.set_backward(y, [&t, a, y] {
      double dy = t.grad_of(y.id())[0];
      for (double& g : t.grad_buffer(a.id())) g += dy;
    });
  }
  return y;
}

// GELU, tanh approximation.
inline Var gelu(Var a) {
  Tape& t = detail::owner(a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(av[i]);
  bool rg = t.requires_grad(a.id());
  Var y = t.emit(a.shape(), std::move(out), rg, "gelu");
  if (rg) {
    t.set_backward(y, [&t, a, y] {
      auto dy = t.grad_of(y.id());
      const double* av = t.value_of(a.id());
      auto da = t.grad_buffer(a.id());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * kernels::gelu_grad(av[i]);
    });
  }
  return y;
}

namespace detail {

// Shared implementation for affine and plain layer norm. gain/bias are only
// read when has_affine.
inline Var layer_norm_impl(Var x, const Var* gain, const Var* bias, double eps) {
  Tape& t = owner(x);
  if (eps <= 0.0) throw DimensionError("layer_norm: eps must be positive");
  if (x.shape().empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = leading(x.shape());
  if (gain) {
    t.check_owner({x, *gain, *bias});
    if (gain->shape() != Shape{d} || bias->shape() != Shape{d}) {
      throw DimensionError("layer_norm: last dim " + std::to_string(d) + " vs gain " +
                           to_string(gain->shape()) + ", bias " + to_string(bias->shape()));
    }
  }
  std::vector<double> out(rows * d);
  auto stats = std::make_shared<std::vector<double>>(2 * rows);
  kernels::layer_norm(t.value_of(x.id()), gain ? t.value_of(gain->id()) : nullptr,
                      bias ? t.value_of(bias->id()) : nullptr, eps, rows, d, out.data(),
                      stats->data(), stats->data() + rows);
  bool rg = t.requires_grad(x.id()) ||
            (gain && (t.requires_grad(gain->id()) || t.requires_grad(bias->id())));
  Var y = t.emit(x.shape(), std::move(out), rg, "layer_norm");
  if (rg) {
    Var g = gain ? *gain : Var();
    Var b = bias ? *bias : Var();
    bool affine = gain != nullptr;
    t.set_backward(y, [&t, x, g, b, y, rows, d, stats, affine] {
      auto dy = t.grad_of(y.id());
      const double* xv = t.value_of(x.id());
      const double* gv = affine ? t.value_of(g.id()) : nullptr;
      const double* mean = stats->data();
      const double* rstd = stats->data() + rows;
      bool want_x = t.requires_grad(x.id());
      bool want_g = affine && t.requires_grad(g.id());
      bool want_b = affine && t.requires_grad(b.id());
      std::span<double> dx = want_x ? t.grad_buffer(x.id()) : std::span<double>{};
      std::span<double> dg = want_g ? t.grad_buffer(g.id()) : std::span<double>{};
      std::span<double> db = want_b ? t.grad_buffer(b.id()) : std::span<double>{};
      std::vector<double> gy(d);
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv + r * d;
        const double* dyr = dy.data() + r * d;
        double mg = 0.0, mgx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double xhat = (xr[j] - mean[r]) * rstd[r];
          gy[j] = dyr[j] * (gv ? gv[j] : 1.0);
          mg += gy[j];
          mgx += gy[j] * xhat;
          if (want_g) dg[j] += dyr[j] * xhat;
          if (want_b) db[j] += dyr[j];
        }
        mg *= inv_d;
        mgx *= inv_d;
        if (want_x) {
          for (std::size_t j = 0; j < d; ++j) {
            double xhat = (xr[j] - mean[r]) * rstd[r];
            dx[r * d + j] += rstd[r] * (gy[j] - mg - xhat * mgx);
          }
        }
      }
    });
  }
  return y;
}

}  // namespace detail

// Per-row normalization over the last dimension followed by gain/bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  return detail::layer_norm_impl(x, &gain, &bias, eps);
}

// Per-row normalization without an affine transform.
inline Var layer_norm(Var x, double eps) { return detail::layer_norm_impl(x, nullptr, nullptr, eps); }

// Softmax over the last dimension.
inline Var softmax(Var x) {
  Tape& t = detail::owner(x);
  if (x.shape().empty()) throw DimensionError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = detail::leading(x.shape());
  auto xv = x.value();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r) kernels::softmax_row(out.data() + r * n, n);
  bool rg = t.requires_grad(x.id());
  Var y = t.emit(x.shape(), std::move(out), rg, "softmax");
  if (rg) {
    t.set_backward(y, [&t, x, y, rows, n] {
      auto dy = t.grad_of(y.id());
      const double* yv = t.value_of(y.id());
      auto dx = t.grad_buffer(x.id());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[r * n + j] * yv[r * n + j];
        for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yv[r * n + j] * (dy[r * n + j] - dot);
      }
    });
  }
  return y;
}

// Mean negative log-likelihood of targets under row-wise softmax(logits).
inline Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = detail::owner(logits);
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  for (int tg : targets) {
    if (tg < 0 || static_cast<std::size_t>(tg) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(tg) + " outside vocab of " +
                       std::to_string(vocab));
    }
  }
  auto lv = logits.value();
  auto probs = std::make_shared<std::vector<double>>(lv.begin(), lv.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double* row = probs->data() + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    loss += (mx + std::log(s)) - row[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) row[j] = std::exp(row[j] - mx) / s;
  }
  loss /= static_cast<double>(n);
  bool rg = t.requires_grad(logits.id());
  Var y = t.emit({}, {loss}, rg, "cross_entropy");
  if (rg) {
    std::vector<int> tg(targets.begin(), targets.end());
    t.set_backward(y, [&t, logits, y, probs, tg = std::move(tg), n, vocab] {
      double scale = t.grad_of(y.id())[0] / static_cast<double>(n);
      auto dl = t.grad_buffer(logits.id());
      for (std::size_t r = 0; r < n; ++r) {
        const double* p = probs->data() + r * vocab;
        double* g = dl.data() + r * vocab;
        for (std::size_t j = 0; j < vocab; ++j) g[j] += scale * p[j];
        g[tg[r]] -= scale;
      }
    });
  }
  return y;
}

// Rows of table [V x d] selected by ids -> [n x d].
inline Var embedding_lookup(Var table, std::span<const int> ids) {
  Tape& t = detail::owner(table);
  detail::require_rank(table, 2, "embedding_lookup");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  const double* tv = t.value_of(table.id());
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  bool rg = t.requires_grad(table.id());
  Var y = t.emit({ids.size(), d}, std::move(out), rg, "embedding_lookup");
  if (rg) {
    std::vector<int> idv(ids.begin(), ids.end());
    t.set_backward(y, [&t, table, y, idv = std::move(idv), d] {
      auto dy = t.grad_of(y.id());
      auto dt = t.grad_buffer(table.id());
      for (std::size_t i = 0; i < idv.size(); ++i) {
        double* row = dt.data() + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
      }
    });
  }
  return y;
}

inline Var transpose(Var a) {
  Tape& t = detail::owner(a);
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), n, m) = detail::ConstMap(t.value_of(a.id()), m, n).transpose();
  bool rg = t.requires_grad(a.id());
  Var y = t.emit({n, m}, std::move(out), rg, "transpose");
  if (rg) {
    t.set_backward(y, [&t, a, y, m, n] {
      detail::MutMap(t.grad_buffer(a.id()).data(), m, n) +=
          detail::ConstMap(t.grad_of(y.id()).data(), n, m).transpose();
    });
  }
  return y;
}

inline Var reshape(Var a, Shape shape) {
  Tape& t = detail::owner(a);
  if (numel(shape) != numel(a.shape())) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  auto av = a.value();
  bool rg = t.requires_grad(a.id());
  Var y = t.emit(std::move(shape), std::vector<double>(av.begin(), av.end()), rg, "reshape");
  if (rg) {
    t.set_backward(y, [&t, a, y] { detail::accumulate(t.grad_buffer(a.id()), t.grad_of(y.id())); });
  }
  return y;
}

// Causal multi-head self-attention core. q, k, v are [n x d] with
// n = batch * seq_len; rows are grouped into independent sequences of
// seq_len tokens and each head uses a contiguous d / n_heads column slice.
// Returns softmax(q k^T / sqrt(dh) + causal mask) v per head, concatenated.
inline Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len) {
  Tape& t = detail::owner(q);
  t.check_owner({q, k, v});
  detail::require_rank(q, 2, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q/k/v shapes differ");
  }
  const std::size_t n = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: d % heads != 0");
  if (seq_len == 0 || n % seq_len != 0) throw DimensionError("causal_attention: rows % seq_len != 0");
  const std::size_t dh = d / n_heads, batch = n / seq_len, T = seq_len;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(batch * n_heads * T * T, 0.0);
  std::vector<double> out(n * d, 0.0);
  const double* qv = t.value_of(q.id());
  const double* kv = t.value_of(k.id());
  const double* vv = t.value_of(v.id());
  using detail::ConstStridedMap;
  using detail::MutStridedMap;
  using detail::Stride;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = b * T * d + h * dh;
      ConstStridedMap Q(qv + off, T, dh, Stride(d));
      ConstStridedMap K(kv + off, T, dh, Stride(d));
      ConstStridedMap V(vv + off, T, dh, Stride(d));
      detail::MutMap P(probs->data() + (b * n_heads + h) * T * T, T, T);
      P.noalias() = (Q * K.transpose()) * inv;
      for (std::size_t i = 0; i < T; ++i) {
        double* row = P.data() + i * T;
        kernels::softmax_row(row, i + 1);
        std::fill(row + i + 1, row + T, 0.0);
      }
      MutStridedMap(out.data() + off, T, dh, Stride(d)).noalias() = P * V;
    }
  }
  bool rg = t.requires_grad(q.id()) || t.requires_grad(k.id()) || t.requires_grad(v.id());
  Var y = t.emit({n, d}, std::move(out), rg, "causal_attention");
  if (rg) {
    t.set_backward(y, [&t, q, k, v, y, probs, batch, n_heads, T, d, dh, inv] {
      const double* qv = t.value_of(q.id());
      const double* kv = t.value_of(k.id());
      const double* vv = t.value_of(v.id());
      const double* dyv = t.grad_of(y.id()).data();
      double* dq = t.requires_grad(q.id()) ? t.grad_buffer(q.id()).data() : nullptr;
      double* dk = t.requires_grad(k.id()) ? t.grad_buffer(k.id()).data() : nullptr;
      double* dvp = t.requires_grad(v.id()) ? t.grad_buffer(v.id()).data() : nullptr;
      detail::RowMat dP(T, T);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = b * T * d + h * dh;
          ConstStridedMap Q(qv + off, T, dh, Stride(d));
          ConstStridedMap K(kv + off, T, dh, Stride(d));
          ConstStridedMap V(vv + off, T, dh, Stride(d));
          ConstStridedMap dY(dyv + off, T, dh, Stride(d));
          detail::ConstMap P(probs->data() + (b * n_heads + h) * T * T, T, T);
          if (dvp) MutStridedMap(dvp + off, T, dh, Stride(d)).noalias() += P.transpose() * dY;
          dP.noalias() = dY * V.transpose();
          for (std::size_t i = 0; i < T; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
            for (std::size_t j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv;
            for (std::size_t j = i + 1; j < T; ++j) dP(i, j) = 0.0;
          }
          if (dq) MutStridedMap(dq + off, T, dh, Stride(d)).noalias() += dP * K;
          if (dk) MutStridedMap(dk + off, T, dh, Stride(d)).noalias() += dP.transpose() * Q;
        }
      }
    });
  }
  return y;
}

}  // namespace graftlab
