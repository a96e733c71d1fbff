#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qlab/errors.hpp"
#include "qlab/rng.hpp"

namespace qlab {

template <typename Real>
class Tape;

namespace detail {

template <typename Real>
struct Storage {
  std::vector<std::size_t> shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

}  // namespace detail

// Dense row-major tensor with shared-handle semantics: copies alias the same
// storage. Real selects the precision profile (float = fast, double = check).
template <typename Real>
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), Real(0));
  }

  static Tensor filled(Shape shape, Real v) {
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<Real>>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(detail::shape_numel(t.s_->shape), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<Real> values) {
    if (detail::shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + detail::shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<Real>>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
  }

  static Tensor scalar(Real v) { return from({1}, {v}); }

  // Leaf parameter: participates in gradient accumulation.
  static Tensor param(Shape shape, std::vector<Real> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->data.size(); }
  std::size_t ndim() const { return s_->shape.size(); }

  std::size_t rows() const {
    require_2d("rows");
    return s_->shape[0];
  }
  std::size_t cols() const {
    require_2d("cols");
    return s_->shape[1];
  }

  std::span<Real> data() { return {s_->data.data(), s_->data.size()}; }
  std::span<const Real> data() const { return {s_->data.data(), s_->data.size()}; }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  std::span<Real> grad() {
    require_grad_buffer();
    return {s_->grad.data(), s_->grad.size()};
  }
  std::span<const Real> grad() const {
    require_grad_buffer();
    return {s_->grad.data(), s_->grad.size()};
  }

  void set_requires_grad(bool on) {
    if (on) {
      s_->requires_grad = true;
      s_->grad.assign(s_->data.size(), Real(0));
    } else {
      s_->requires_grad = false;
      s_->grad.clear();
    }
  }

  void zero_grad() {
    if (requires_grad()) s_->grad.assign(s_->data.size(), Real(0));
  }

  // Deep copy; the clone keeps requires_grad but starts with zero grad.
  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<Real>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    if (s_->requires_grad) t.s_->grad.assign(s_->data.size(), Real(0));
    return t;
  }

  Real value() const {
    if (size() != 1) {
      throw ContractError("value(): tensor " + detail::shape_str(s_->shape) + " is not scalar");
    }
    return s_->data[0];
  }

  Real at(std::size_t i, std::size_t j) const {
    require_2d("at");
    return s_->data[i * s_->shape[1] + j];
  }
  Real& at(std::size_t i, std::size_t j) {
    require_2d("at");
    return s_->data[i * s_->shape[1] + j];
  }

  bool same_shape(const Tensor& other) const { return s_->shape == other.s_->shape; }

  std::shared_ptr<detail::Storage<Real>> storage() const { return s_; }

 private:
  void require_2d(const char* who) const {
    if (s_->shape.size() != 2) {
      throw ContractError(std::string(who) + ": tensor " + detail::shape_str(s_->shape) +
                          " is not 2-d");
    }
  }
  void require_grad_buffer() const {
    if (!requires_grad()) throw StateError("grad(): tensor does not track gradients");
  }

  std::shared_ptr<detail::Storage<Real>> s_;
};

// Linear record of backward steps. Constructing a Tape makes it the active
// recorder for the current thread; ops append one closure each. backward()
// replays the record once in exact reverse order.
template <typename Real>
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept { return current_; }

  void record(std::function<void()> step) {
    if (consumed_) throw StateError("tape: recording onto a consumed tape");
    steps_.push_back(std::move(step));
  }

  std::size_t num_ops() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // Populates grad buffers of every tracked tensor reachable from loss.
  void backward(Tensor<Real>& loss) {
    if (consumed_) throw StateError("tape: backward called twice on the same tape");
    if (loss.size() != 1) {
      throw ContractError("backward: loss has shape " + detail::shape_str(loss.shape()) +
                          ", expected a scalar");
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward: loss is not connected to tracked parameters");
    }
    consumed_ = true;
    loss.grad()[0] += Real(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  template <typename R>
  friend class NoGradGuard;

  inline static thread_local Tape* current_ = nullptr;
  Tape* prev_;
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

// Suppresses recording for its scope (target computation, evaluation).
template <typename Real>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Tape<Real>::current_) { Tape<Real>::current_ = nullptr; }
  ~NoGradGuard() { Tape<Real>::current_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<Real>* saved_;
};

namespace detail {

template <typename Real>
bool any_tracked() {
  return false;
}

template <typename Real, typename... Rest>
bool any_tracked(const Tensor<Real>& first, const Rest&... rest) {
  return first.requires_grad() || any_tracked<Real>(rest...);
}

// Ops call this after computing the forward value: verifies finiteness and,
// when a tape is active and an input is tracked, marks the output and records
// the backward closure.
template <typename Real, typename Fn, typename... Ins>
void finish_op(const char* name, Tensor<Real>& out, Fn&& make_backward, const Ins&... ins) {
  for (Real v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(name) + ": non-finite value in output");
    }
  }
  Tape<Real>* tape = Tape<Real>::current();
  if (tape && any_tracked<Real>(ins...)) {
    out.set_requires_grad(true);
    tape->record(make_backward());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " and " +
                         detail::shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  {
    const Real* pa = a.data().data();
    const Real* pb = b.data().data();
    Real* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const Real aip = pa[i * k + p];
        const Real* pbrow = pb + p * n;
        Real* porow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) porow[j] += aip * pbrow[j];
      }
    }
  }
  detail::finish_op(
      "matmul", out,
      [&] {
        return [a, b, out, m, k, n]() mutable {
          const Real* go = out.grad().data();
          if (a.requires_grad()) {
            Real* ga = a.grad().data();
            const Real* pb = b.data().data();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                Real acc = 0;
                for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * pb[p * n + j];
                ga[i * k + p] += acc;
              }
          }
          if (b.requires_grad()) {
            Real* gb = b.grad().data();
            const Real* pa = a.data().data();
            for (std::size_t p = 0; p < k; ++p)
              for (std::size_t i = 0; i < m; ++i) {
                const Real aip = pa[i * k + p];
                for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
              }
          }
        };
      },
      a, b);
  return out;
}

// x [m x in] * w [in x out] + b [out] broadcast per row.
template <typename Real>
Tensor<Real> affine(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.rows()) {
    throw DimensionError("affine: incompatible shapes " + detail::shape_str(x.shape()) + " and " +
                         detail::shape_str(w.shape()));
  }
  if (b.size() != w.cols()) {
    throw DimensionError("affine: bias " + detail::shape_str(b.shape()) + " does not match " +
                         std::to_string(w.cols()) + " outputs");
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  {
    const Real* px = x.data().data();
    const Real* pw = w.data().data();
    const Real* pbias = b.data().data();
    Real* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      Real* porow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) porow[j] = pbias[j];
      for (std::size_t p = 0; p < k; ++p) {
        const Real xip = px[i * k + p];
        const Real* pwrow = pw + p * n;
        for (std::size_t j = 0; j < n; ++j) porow[j] += xip * pwrow[j];
      }
    }
  }
  detail::finish_op(
      "affine", out,
      [&] {
        return [x, w, b, out, m, k, n]() mutable {
          const Real* go = out.grad().data();
          if (x.requires_grad()) {
            Real* gx = x.grad().data();
            const Real* pw = w.data().data();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                Real acc = 0;
                for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * pw[p * n + j];
                gx[i * k + p] += acc;
              }
          }
          if (w.requires_grad()) {
            Real* gw = w.grad().data();
            const Real* px = x.data().data();
            for (std::size_t p = 0; p < k; ++p)
              for (std::size_t i = 0; i < m; ++i) {
                const Real xip = px[i * k + p];
                for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += xip * go[i * n + j];
              }
          }
          if (b.requires_grad()) {
            Real* gb = b.grad().data();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
          }
        };
      },
      x, w, b);
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<Real> out = Tensor<Real>::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
  detail::finish_op(
      "transpose", out,
      [&] {
        return [x, out, m, n]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
        };
      },
      x);
  return out;
}

namespace detail {

template <typename Real>
void require_same_shape(const char* name, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Elementwise binary op with per-element backward weights.
template <typename Real, typename FwdFn, typename BwdFn>
Tensor<Real> pointwise2(const char* name, const Tensor<Real>& a, const Tensor<Real>& b, FwdFn fwd,
                        BwdFn bwd) {
  require_same_shape(name, a, b);
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  finish_op(
      name, out,
      [&] {
        return [a, b, out, n, bwd]() mutable {
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < n; ++i) {
            auto [da, db] = bwd(a.data()[i], b.data()[i], out.data()[i]);
            if (a.requires_grad()) a.grad()[i] += go[i] * da;
            if (b.requires_grad()) b.grad()[i] += go[i] * db;
          }
        };
      },
      a, b);
  return out;
}

template <typename Real, typename FwdFn, typename BwdFn>
Tensor<Real> pointwise1(const char* name, const Tensor<Real>& x, FwdFn fwd, BwdFn bwd) {
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(x.data()[i]);
  finish_op(
      name, out,
      [&] {
        return [x, out, n, bwd]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * bwd(x.data()[i], out.data()[i]);
        };
      },
      x);
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::pointwise2<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real) { return std::pair<Real, Real>(1, 1); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::pointwise2<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real) { return std::pair<Real, Real>(1, -1); });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::pointwise2<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real) { return std::pair<Real, Real>(y, x); });
}

template <typename Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::pointwise2<Real>(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real x, Real y, Real) { return std::pair<Real, Real>(Real(1) / y, -x / (y * y)); });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  return detail::pointwise1<Real>(
      "scale", x, [c](Real v) { return c * v; }, [c](Real, Real) { return c; });
}

template <typename Real>
Tensor<Real> add_const(const Tensor<Real>& x, Real c) {
  return detail::pointwise1<Real>(
      "add_const", x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& x) {
  return scale(x, Real(-1));
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return detail::pointwise1<Real>(
      "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> tanh_t(const Tensor<Real>& x) {
  return detail::pointwise1<Real>(
      "tanh", x, [](Real v) { return std::tanh(v); },
      [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> exp_t(const Tensor<Real>& x) {
  return detail::pointwise1<Real>(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log_t(const Tensor<Real>& x) {
  return detail::pointwise1<Real>(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

// log(1 + exp(x)) in the overflow-safe form.
template <typename Real>
Tensor<Real> softplus(const Tensor<Real>& x) {
  return detail::pointwise1<Real>(
      "softplus", x,
      [](Real v) {
        Real m = v > Real(0) ? v : Real(0);
        return m + std::log1p(std::exp(-std::abs(v)));
      },
      [](Real v, Real) { return Real(1) / (Real(1) + std::exp(-v)); });
}

// Hard clamp; gradient passes only strictly inside the interval.
template <typename Real>
Tensor<Real> clamp(const Tensor<Real>& x, Real lo, Real hi) {
  if (!(lo < hi)) throw ParameterError("clamp: lo must be < hi");
  return detail::pointwise1<Real>(
      "clamp", x,
      [lo, hi](Real v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](Real v, Real) { return (v > lo && v < hi) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Tensor<Real> out = Tensor<Real>::zeros({1});
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  out.data()[0] = acc;
  detail::finish_op(
      "sum", out,
      [&] {
        return [x, out]() mutable {
          const Real g = out.grad()[0];
          for (Real& gv : x.grad()) gv += g;
        };
      },
      x);
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  const std::size_t n = x.size();
  Tensor<Real> out = Tensor<Real>::zeros({1});
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  out.data()[0] = acc / static_cast<Real>(n);
  detail::finish_op(
      "mean", out,
      [&] {
        return [x, out, n]() mutable {
          const Real g = out.grad()[0] / static_cast<Real>(n);
          for (Real& gv : x.grad()) gv += g;
        };
      },
      x);
  return out;
}

// Row-wise sum: [m x n] -> [m x 1].
template <typename Real>
Tensor<Real> row_sum(const Tensor<Real>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<Real> out = Tensor<Real>::zeros({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    Real acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += x.data()[i * n + j];
    out.data()[i] = acc;
  }
  detail::finish_op(
      "row_sum", out,
      [&] {
        return [x, out, m, n]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i];
        };
      },
      x);
  return out;
}

// Numerically stable per-row softmax (max subtraction).
template <typename Real>
Tensor<Real> row_softmax(const Tensor<Real>& x) {
  for (Real v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("row_softmax: non-finite input");
  }
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data().data() + i * n;
    Real* oi = out.data().data() + i * n;
    Real mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    Real denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      denom += oi[j];
    }
    for (std::size_t j = 0; j < n; ++j) oi[j] /= denom;
  }
  detail::finish_op(
      "row_softmax", out,
      [&] {
        return [x, out, m, n]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          const Real* y = out.data().data();
          for (std::size_t i = 0; i < m; ++i) {
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
              gx[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
          }
        };
      },
      x);
  return out;
}

// Per-row normalization to zero mean / unit variance, then gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 2) {
    throw ParameterError("layer_norm: row width " + std::to_string(n) + " is degenerate (need >= 2)");
  }
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias do not match row width " + std::to_string(n));
  }
  if (!(eps > Real(0))) throw ParameterError("layer_norm: eps must be positive");
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  // Saved statistics for backward.
  auto mu = std::make_shared<std::vector<Real>>(m);
  auto istd = std::make_shared<std::vector<Real>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data().data() + i * n;
    Real* oi = out.data().data() + i * n;
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += xi[j];
    const Real mean_i = s / static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const Real d = xi[j] - mean_i;
      var += d * d;
    }
    var /= static_cast<Real>(n);
    const Real inv = Real(1) / std::sqrt(var + eps);
    (*mu)[i] = mean_i;
    (*istd)[i] = inv;
    for (std::size_t j = 0; j < n; ++j)
      oi[j] = gain.data()[j] * ((xi[j] - mean_i) * inv) + bias.data()[j];
  }
  detail::finish_op(
      "layer_norm", out,
      [&] {
        return [x, gain, bias, out, mu, istd, m, n]() mutable {
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < m; ++i) {
            const Real* xi = x.data().data() + i * n;
            const Real inv = (*istd)[i];
            const Real mean_i = (*mu)[i];
            // Accumulate row sums of ghat and ghat * xhat.
            Real sum_g = 0, sum_gx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const Real xhat = (xi[j] - mean_i) * inv;
              const Real ghat = go[i * n + j] * gain.data()[j];
              sum_g += ghat;
              sum_gx += ghat * xhat;
            }
            if (x.requires_grad()) {
              Real* gx = x.grad().data();
              for (std::size_t j = 0; j < n; ++j) {
                const Real xhat = (xi[j] - mean_i) * inv;
                const Real ghat = go[i * n + j] * gain.data()[j];
                gx[i * n + j] +=
                    inv * (ghat - sum_g / static_cast<Real>(n) - xhat * sum_gx / static_cast<Real>(n));
              }
            }
            if (gain.requires_grad()) {
              Real* gg = gain.grad().data();
              for (std::size_t j = 0; j < n; ++j)
                gg[j] += go[i * n + j] * ((xi[j] - mean_i) * inv);
            }
            if (bias.requires_grad()) {
              Real* gb = bias.grad().data();
              for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
            }
          }
        };
      },
      x, gain, bias);
  return out;
}

// Inverted dropout: kept entries scaled by 1/(1-rate) at train time, identity
// in eval mode.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real rate, bool training, Rng& rng) {
  if (!(rate >= Real(0) && rate < Real(1))) {
    throw ParameterError("dropout: rate must be in [0, 1)");
  }
  if (!training || rate == Real(0)) {
    // Identity pass; still a recorded op so gradients flow unchanged.
    return detail::pointwise1<Real>(
        "dropout", x, [](Real v) { return v; }, [](Real, Real) { return Real(1); });
  }
  const std::size_t n = x.size();
  auto mask = std::make_shared<std::vector<Real>>(n);
  const Real keep_scale = Real(1) / (Real(1) - rate);
  for (std::size_t i = 0; i < n; ++i) {
    (*mask)[i] = (rng.uniform01() < static_cast<double>(rate)) ? Real(0) : keep_scale;
  }
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * (*mask)[i];
  detail::finish_op(
      "dropout", out,
      [&] {
        return [x, out, mask, n]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * (*mask)[i];
        };
      },
      x);
  return out;
}

// Concatenate 2-d tensors along the feature (column) axis.
template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row count mismatch " + detail::shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor<Real> out = Tensor<Real>::zeros({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.data()[i * total + off + j] = p.data()[i * n + j];
    off += n;
  }
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.requires_grad();
  for (Real v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("concat_cols: non-finite value in output");
  }
  Tape<Real>* tape = Tape<Real>::current();
  if (tape && tracked) {
    out.set_requires_grad(true);
    tape->record([parts, out, m, total]() mutable {
      const Real* go = out.grad().data();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t n = p.cols();
        if (p.requires_grad()) {
          Real* gp = p.grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += go[i * total + off + j];
        }
        off += n;
      }
    });
  }
  return out;
}

// Column slice [c0, c1) of a 2-d tensor.
template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t c0, std::size_t c1) {
  const std::size_t m = x.rows(), n = x.cols();
  if (c0 >= c1 || c1 > n) throw DimensionError("slice_cols: bad range");
  const std::size_t w = c1 - c0;
  Tensor<Real> out = Tensor<Real>::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.data()[i * w + j] = x.data()[i * n + c0 + j];
  detail::finish_op(
      "slice_cols", out,
      [&] {
        return [x, out, m, n, w, c0]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += go[i * w + j];
        };
      },
      x);
  return out;
}

// Row slice [r0, r1) of a 2-d tensor.
template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, std::size_t r0, std::size_t r1) {
  const std::size_t m = x.rows(), n = x.cols();
  if (r0 >= r1 || r1 > m) throw DimensionError("slice_rows: bad range");
  const std::size_t h = r1 - r0;
  Tensor<Real> out = Tensor<Real>::zeros({h, n});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[(r0 + i) * n + j];
  detail::finish_op(
      "slice_rows", out,
      [&] {
        return [x, out, h, n, r0]() mutable {
          Real* gx = x.grad().data();
          const Real* go = out.grad().data();
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[(r0 + i) * n + j] += go[i * n + j];
        };
      },
      x);
  return out;
}

// Stack 2-d tensors with equal column counts along the row axis.
template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column count mismatch " + detail::shape_str(p.shape()));
    }
    total += p.rows();
  }
  Tensor<Real> out = Tensor<Real>::zeros({total, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t m = p.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.data()[(off + i) * n + j] = p.data()[i * n + j];
    off += m;
  }
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.requires_grad();
  for (Real v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("concat_rows: non-finite value in output");
  }
  Tape<Real>* tape = Tape<Real>::current();
  if (tape && tracked) {
    out.set_requires_grad(true);
    tape->record([parts, out, n]() mutable {
      const Real* go = out.grad().data();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t m = p.rows();
        if (p.requires_grad()) {
          Real* gp = p.grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += go[(off + i) * n + j];
        }
        off += m;
      }
    });
  }
  return out;
}

}  // namespace qlab
