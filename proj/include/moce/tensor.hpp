// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a Node holding values and (lazily) gradients.
// Operations applied while a Tape is alive on the current thread are appended
// to that tape when at least one input requires a gradient; Tape::backward
// then walks the recorded nodes in reverse append order. Without an active
// tape every operation is a plain forward computation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moce/common.hpp"

namespace moce::ad {

using Shape = std::vector<std::size_t>;

class NotScalar : public Error {
 public:
  using Error::Error;
};

class AllMaskedRow : public Error {
 public:
  using Error::Error;
};

class EmptyAxis : public Error {
 public:
  using Error::Error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ')';
  return os.str();
}

/// Stand-in for -inf in masked score vectors: finite, so gradients stay finite.
template <class Real>
inline constexpr Real kMasked = std::numeric_limits<Real>::lowest();

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

template <class Real>
class Tape;

template <class Real>
inline thread_local Tape<Real>* active_tape = nullptr;

template <class Real>
class Tensor {
 public:
  using node_type = Node<Real>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<node_type> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<Real> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeMismatch("value count " + std::to_string(values.size()) +
                          " does not match shape " + shape_str(shape));
    auto n = std::make_shared<node_type>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }
  static Tensor full(Shape shape, Real v) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, v));
  }
  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }
  static Tensor column(std::vector<Real> v) {
    const auto n = v.size();
    return from({n, 1}, std::move(v));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 0 ? 1 : node_->shape[0]; }
  std::size_t cols() const {
    return rank() < 2 ? 1 : numel() / std::max<std::size_t>(rows(), 1);
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  std::span<const Real> values() const { return node_->value; }
  std::span<Real> mutable_values() { return node_->value; }
  Real item() const {
    if (numel() != 1) throw NotScalar("item() on tensor " + shape_str(shape()));
    return node_->value[0];
  }
  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  node_type* node() const { return node_.get(); }
  const std::shared_ptr<node_type>& handle() const { return node_; }

 private:
  std::shared_ptr<node_type> node_;
};

/// Records operations executed on the owning thread while alive. Nesting
/// restores the previously active tape on destruction.
template <class Real>
class Tape {
 public:
  Tape() : previous_(active_tape<Real>) { active_tape<Real> = this; }
  ~Tape() { active_tape<Real> = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<Real>> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable
  /// from `loss`. Leaves accumulate additively across calls.
  void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1)
      throw NotScalar("backward() needs a scalar loss, got " +
                      shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Real>& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n);
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
    nodes_.clear();
  }

 private:
  std::vector<std::shared_ptr<Node<Real>>> nodes_;
  Tape* previous_;
};

namespace detail {

template <class Real>
bool any_requires_grad(std::initializer_list<const Tensor<Real>*> parents) {
  for (auto* p : parents)
    if (p->requires_grad()) return true;
  return false;
}

template <class Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         bool track, std::function<void(Node<Real>&)> bw) {
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->is_leaf = false;
  if (track && active_tape<Real> != nullptr) {
    n->requires_grad = true;
    n->backward = std::move(bw);
    active_tape<Real>->record(n);
  }
  return Tensor<Real>(std::move(n));
}

// Index maps for the supported broadcasts: equal shapes, scalar operand, or
// an (n x 1) column against (n x m).
enum class Bcast { kSame, kScalar, kColumn };

struct BinaryPlan {
  Shape out;
  Bcast a = Bcast::kSame;
  Bcast b = Bcast::kSame;
  std::size_t cols = 1;
};

template <class Real>
BinaryPlan plan_binary(const Tensor<Real>& a, const Tensor<Real>& b,
                       const char* op) {
  BinaryPlan p;
  if (a.shape() == b.shape()) {
    p.out = a.shape();
  } else if (b.numel() == 1) {
    p.out = a.shape();
    p.b = Bcast::kScalar;
  } else if (a.numel() == 1) {
    p.out = b.shape();
    p.a = Bcast::kScalar;
  } else if (a.rank() == 2 && b.rank() == 2 && a.rows() == b.rows() &&
             b.cols() == 1) {
    p.out = a.shape();
    p.b = Bcast::kColumn;
  } else if (a.rank() == 2 && b.rank() == 2 && a.rows() == b.rows() &&
             a.cols() == 1) {
    p.out = b.shape();
    p.a = Bcast::kColumn;
  } else {
    throw ShapeMismatch(std::string(op) + ": cannot combine " +
                        shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  p.cols = p.out.size() == 2 ? p.out[1] : 1;
  return p;
}

inline std::size_t bidx(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::kSame:
      return i;
    case Bcast::kScalar:
      return 0;
    case Bcast::kColumn:
      return i / cols;
  }
  return i;
}

// dfa/dfb give the partial derivatives given (a, b, out).
template <class Real, class F, class DA, class DB>
Tensor<Real> binary(const char* op, const Tensor<Real>& a,
                    const Tensor<Real>& b, F f, DA dfa, DB dfb) {
  const BinaryPlan p = plan_binary(a, b, op);
  const std::size_t n = shape_numel(p.out);
  std::vector<Real> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = f(av[bidx(p.a, i, p.cols)], bv[bidx(p.b, i, p.cols)]);
  auto an = a.handle();
  auto bn = b.handle();
  return make_result<Real>(
      op, p.out, std::move(out), any_requires_grad<Real>({&a, &b}),
      [an, bn, p, dfa, dfb](Node<Real>& self) {
        const std::size_t n = self.value.size();
        if (an->requires_grad) {
          auto& ga = an->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = bidx(p.a, i, p.cols);
            const std::size_t ib = bidx(p.b, i, p.cols);
            ga[ia] += self.grad[i] * dfa(an->value[ia], bn->value[ib],
                                         self.value[i]);
          }
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = bidx(p.a, i, p.cols);
            const std::size_t ib = bidx(p.b, i, p.cols);
            gb[ib] += self.grad[i] * dfb(an->value[ia], bn->value[ib],
                                         self.value[i]);
          }
        }
      });
}

}  // namespace detail

/// Elementwise op with a user-supplied derivative df(x, y). Public so callers
/// (and the gradient-check sensitivity tests) can register custom rules.
template <class Real, class F, class DF>
Tensor<Real> unary_op(const char* op, const Tensor<Real>& x, F f, DF df) {
  std::vector<Real> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.handle();
  return detail::make_result<Real>(
      op, x.shape(), std::move(out), x.requires_grad(),
      [xn, df](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += self.grad[i] * df(xn->value[i], self.value[i]);
      });
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real) { return Real(1); },
      [](Real, Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real) { return Real(1); },
      [](Real, Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real, Real y, Real) { return y; },
      [](Real x, Real, Real) { return x; });
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real, Real y, Real) { return Real(1) / y; },
      [](Real x, Real y, Real) { return -x / (y * y); });
}

template <class Real>
Tensor<Real> negate(const Tensor<Real>& x) {
  return unary_op<Real>("negate", x, [](Real v) { return -v; },
                        [](Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return unary_op<Real>(
      "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
  return unary_op<Real>("tanh", x, [](Real v) { return std::tanh(v); },
                        [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Real sigmoid_value(Real v) {
  if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real(1) + e);
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return unary_op<Real>("sigmoid", x, [](Real v) { return sigmoid_value(v); },
                        [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Real softplus_value(Real v) {
  return v > Real(30) ? v : std::log1p(std::exp(v));
}

template <class Real>
Tensor<Real> softplus(const Tensor<Real>& x) {
  return unary_op<Real>(
      "softplus", x, [](Real v) { return softplus_value(v); },
      [](Real v, Real) {
#ifdef MOCE_INJECT_SOFTPLUS_FAULT
        return Real(1.05) * sigmoid_value(v);
#else
        return sigmoid_value(v);
#endif
      });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
  return unary_op<Real>("log", x, [](Real v) { return std::log(v); },
                        [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return unary_op<Real>("exp", x, [](Real v) { return std::exp(v); },
                        [](Real, Real y) { return y; });
}

/// sqrt with a zero subgradient at 0, so sqrt(variance) of a constant vector
/// stays finite under differentiation.
template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
  return unary_op<Real>(
      "sqrt", x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return y > Real(0) ? Real(0.5) / y : Real(0); });
}

template <class Real>
Tensor<Real> normal_cdf(const Tensor<Real>& x) {
  return unary_op<Real>(
      "normal_cdf", x,
      [](Real v) { return static_cast<Real>(moce::normal_cdf(v)); },
      [](Real v, Real) { return static_cast<Real>(moce::normal_pdf(v)); });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  return unary_op<Real>("scale", x, [c](Real v) { return c * v; },
                        [c](Real, Real) { return c; });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
  return unary_op<Real>("add_scalar", x, [c](Real v) { return v + c; },
                        [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, b);
}
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) {
  return sub(a, b);
}
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) {
  return mul(a, b);
}

/// (n x k) . (k x m). 1-D operands are treated as a single row.
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const std::size_t n = a.rank() == 1 ? 1 : a.rows();
  const std::size_t k = a.rank() == 1 ? a.numel() : a.cols();
  if (b.rank() != 2 || b.rows() != k)
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " . " +
                        shape_str(b.shape()));
  const std::size_t m = b.cols();
  std::vector<Real> out(n * m, Real(0));
  const Real* av = a.values().data();
  const Real* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    Real* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      if (aip == Real(0)) continue;
      const Real* brow = bv + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.handle();
  auto bn = b.handle();
  return detail::make_result<Real>(
      "matmul", Shape{n, m}, std::move(out),
      detail::any_requires_grad<Real>({&a, &b}),
      [an, bn, n, k, m](Node<Real>& self) {
        const Real* dc = self.grad.data();
        if (an->requires_grad) {
          auto& ga = an->grad_buffer();
          const Real* bv = bn->value.data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              Real s = 0;
              for (std::size_t j = 0; j < m; ++j)
                s += dc[i * m + j] * bv[p * m + j];
              ga[i * k + p] += s;
            }
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          const Real* av = an->value.data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const Real aip = av[i * k + p];
              if (aip == Real(0)) continue;
              for (std::size_t j = 0; j < m; ++j)
                gb[p * m + j] += aip * dc[i * m + j];
            }
        }
      });
}

/// Adds a length-d bias to every row of an (n x d) matrix.
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  const std::size_t d = x.cols();
  if (bias.numel() != d)
    throw ShapeMismatch("add_bias: " + shape_str(x.shape()) + " + " +
                        shape_str(bias.shape()));
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % d];
  auto xn = x.handle();
  auto bn = bias.handle();
  return detail::make_result<Real>(
      "add_bias", x.shape(), std::move(out),
      detail::any_requires_grad<Real>({&x, &bias}),
      [xn, bn, d](Node<Real>& self) {
        if (xn->requires_grad) {
          auto& g = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i % d] += self.grad[i];
        }
      });
}

/// Row-wise softmax over the last axis with max subtraction. Entries equal to
/// kMasked<Real> receive zero probability; a fully masked row is an error.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  const std::size_t cols = x.rank() == 1 ? x.numel() : x.cols();
  const std::size_t rows = cols == 0 ? 0 : x.numel() / cols;
  std::vector<Real> out(x.numel());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * cols;
    Real mx = kMasked<Real>;
    bool live = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (row[j] != kMasked<Real>) live = true;
      mx = std::max(mx, row[j]);
    }
    if (!live) throw AllMaskedRow("softmax: row " + std::to_string(r) +
                                  " is fully masked");
    Real z = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const Real e = row[j] == kMasked<Real> ? Real(0) : std::exp(row[j] - mx);
      out[r * cols + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= z;
  }
  auto xn = x.handle();
  return detail::make_result<Real>(
      "softmax", x.shape(), std::move(out), x.requires_grad(),
      [xn, rows, cols](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* y = self.value.data() + r * cols;
          const Real* dy = self.grad.data() + r * cols;
          Real dot = 0;
          for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < cols; ++j)
            g[r * cols + j] += y[j] * (dy[j] - dot);
        }
      });
}

enum class Reduce { kSum, kMean, kMax };

/// Reduction axis; kAllAxes collapses everything to a single element.
inline constexpr int kAllAxes = -1;

/// Reduces along `axis` (0 or 1 for matrices, keeping the reduced dimension
/// as 1) or over all elements. Max routes its gradient to the first argmax.
template <class Real>
Tensor<Real> reduce(Reduce op, const Tensor<Real>& x, int axis = kAllAxes) {
  std::size_t outer, len, inner;
  Shape out_shape;
  if (axis == kAllAxes || x.rank() <= 1) {
    if (axis > 0) throw ShapeMismatch("reduce: bad axis for 1-D tensor");
    outer = 1;
    len = x.numel();
    inner = 1;
    out_shape = {1};
  } else if (x.rank() == 2 && (axis == 0 || axis == 1)) {
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 0) {
      outer = 1, len = r, inner = c;
      out_shape = {1, c};
    } else {
      outer = r, len = c, inner = 1;
      out_shape = {r, 1};
    }
  } else {
    throw ShapeMismatch("reduce: unsupported axis " + std::to_string(axis) +
                        " for " + shape_str(x.shape()));
  }
  if (len == 0) throw EmptyAxis("reduce over an empty axis");
  const auto xv = x.values();
  std::vector<Real> out(outer * inner);
  std::vector<std::size_t> arg;
  if (op == Reduce::kMax) arg.resize(out.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      if (op == Reduce::kMax) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < len; ++l)
          if (xv[base + l * inner] > xv[base + best * inner]) best = l;
        out[o * inner + in] = xv[base + best * inner];
        arg[o * inner + in] = base + best * inner;
      } else {
        Real s = 0;
        for (std::size_t l = 0; l < len; ++l) s += xv[base + l * inner];
        out[o * inner + in] = op == Reduce::kMean ? s / Real(len) : s;
      }
    }
  auto xn = x.handle();
  return detail::make_result<Real>(
      op == Reduce::kMax ? "max" : (op == Reduce::kMean ? "mean" : "sum"),
      std::move(out_shape), std::move(out), x.requires_grad(),
      [xn, op, outer, len, inner, arg = std::move(arg)](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        if (op == Reduce::kMax) {
          for (std::size_t i = 0; i < arg.size(); ++i)
            g[arg[i]] += self.grad[i];
          return;
        }
        const Real w = op == Reduce::kMean ? Real(1) / Real(len) : Real(1);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const Real d = self.grad[o * inner + in] * w;
            const std::size_t base = o * len * inner + in;
            for (std::size_t l = 0; l < len; ++l) g[base + l * inner] += d;
          }
      });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x, int axis = kAllAxes) {
  return reduce(Reduce::kSum, x, axis);
}
template <class Real>
Tensor<Real> mean(const Tensor<Real>& x, int axis = kAllAxes) {
  return reduce(Reduce::kMean, x, axis);
}

namespace detail {
template <class Real>
std::size_t row_width(const Tensor<Real>& x) {
  return x.rank() >= 2 ? x.cols() : 1;
}
template <class Real>
Shape with_rows(const Tensor<Real>& x, std::size_t rows) {
  if (x.rank() >= 2) return Shape{rows, x.cols()};
  return Shape{rows};
}
}  // namespace detail

/// Selects rows of a matrix (or entries of a vector) by index.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x,
                         std::span<const std::size_t> idx) {
  const std::size_t d = detail::row_width(x);
  const std::size_t n = x.rows();
  std::vector<Real> out(idx.size() * d);
  const auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n)
      throw IndexOutOfRange("gather_rows: index " + std::to_string(idx[r]) +
                            " >= " + std::to_string(n));
    std::copy_n(xv.data() + idx[r] * d, d, out.data() + r * d);
  }
  auto xn = x.handle();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result<Real>(
      "gather_rows", detail::with_rows(x, idx.size()), std::move(out),
      x.requires_grad(), [xn, d, ids = std::move(ids)](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t c = 0; c < d; ++c)
            g[ids[r] * d + c] += self.grad[r * d + c];
      });
}

/// Row i of the result is the sum of the value rows whose segment id is i.
template <class Real>
Tensor<Real> scatter_segment_sum(const Tensor<Real>& values,
                                 std::span<const std::size_t> segment_ids,
                                 std::size_t num_segments) {
  if (segment_ids.size() != values.rows())
    throw ShapeMismatch("scatter_segment_sum: " +
                        std::to_string(segment_ids.size()) + " ids for " +
                        std::to_string(values.rows()) + " rows");
  const std::size_t d = detail::row_width(values);
  std::vector<Real> out(num_segments * d, Real(0));
  const auto vv = values.values();
  for (std::size_t r = 0; r < segment_ids.size(); ++r) {
    if (segment_ids[r] >= num_segments)
      throw IndexOutOfRange("scatter_segment_sum: segment id " +
                            std::to_string(segment_ids[r]) + " >= " +
                            std::to_string(num_segments));
    for (std::size_t c = 0; c < d; ++c)
      out[segment_ids[r] * d + c] += vv[r * d + c];
  }
  auto vn = values.handle();
  std::vector<std::size_t> ids(segment_ids.begin(), segment_ids.end());
  return detail::make_result<Real>(
      "scatter_segment_sum", detail::with_rows(values, num_segments),
      std::move(out), values.requires_grad(),
      [vn, d, ids = std::move(ids)](Node<Real>& self) {
        auto& g = vn->grad_buffer();
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t c = 0; c < d; ++c)
            g[r * d + c] += self.grad[ids[r] * d + c];
      });
}

/// Flat-index gather: out.flat[i] = x.flat[idx[i]], shaped as `shape`.
template <class Real>
Tensor<Real> take(const Tensor<Real>& x, std::span<const std::size_t> idx,
                  Shape shape) {
  if (shape_numel(shape) != idx.size())
    throw ShapeMismatch("take: shape " + shape_str(shape) + " for " +
                        std::to_string(idx.size()) + " indices");
  std::vector<Real> out(idx.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.size())
      throw IndexOutOfRange("take: index " + std::to_string(idx[i]));
    out[i] = xv[idx[i]];
  }
  auto xn = x.handle();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result<Real>(
      "take", std::move(shape), std::move(out), x.requires_grad(),
      [xn, ids = std::move(ids)](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < ids.size(); ++i) g[ids[i]] += self.grad[i];
      });
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " +
                        shape_str(shape));
  std::vector<Real> out(x.values().begin(), x.values().end());
  auto xn = x.handle();
  return detail::make_result<Real>(
      "reshape", std::move(shape), std::move(out), x.requires_grad(),
      [xn](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
}

/// Horizontal concatenation of matrices sharing a row count.
template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeMismatch("concat_cols: row mismatch " + shape_str(p.shape()));
    widths.push_back(detail::row_width(p));
    total += widths.back();
    track = track || p.requires_grad();
  }
  std::vector<Real> out(rows * total);
  std::size_t off = 0;
  std::vector<std::shared_ptr<Node<Real>>> nodes;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k],
                  out.data() + r * total + off);
    off += widths[k];
    nodes.push_back(parts[k].handle());
  }
  return detail::make_result<Real>(
      "concat_cols", Shape{rows, total}, std::move(out), track,
      [nodes = std::move(nodes), widths, rows, total](Node<Real>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (nodes[k]->requires_grad) {
            auto& g = nodes[k]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                g[r * widths[k] + c] += self.grad[r * total + off + c];
          }
          off += widths[k];
        }
      });
}

/// Vertical concatenation of matrices sharing a column count.
template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
  const std::size_t d = detail::row_width(parts[0]);
  std::size_t rows = 0;
  bool track = false;
  std::vector<std::shared_ptr<Node<Real>>> nodes;
  for (const auto& p : parts) {
    if (detail::row_width(p) != d)
      throw ShapeMismatch("concat_rows: width mismatch " +
                          shape_str(p.shape()));
    rows += p.rows();
    track = track || p.requires_grad();
    nodes.push_back(p.handle());
  }
  std::vector<Real> out;
  out.reserve(rows * d);
  for (const auto& p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result<Real>(
      "concat_rows", Shape{rows, d}, std::move(out), track,
      [nodes = std::move(nodes)](Node<Real>& self) {
        std::size_t off = 0;
        for (const auto& n : nodes) {
          if (n->requires_grad) {
            auto& g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
              g[i] += self.grad[off + i];
          }
          off += n->value.size();
        }
      });
}

/// Constant sparse matrix in coordinate form (entries need not be sorted).
template <class Real>
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_index;
  std::vector<std::size_t> col_index;
  std::vector<Real> weight;

  void add(std::size_t r, std::size_t c, Real w) {
    row_index.push_back(r);
    col_index.push_back(c);
    weight.push_back(w);
  }
};

/// S . X for a constant sparse S; gradient flows to X only.
template <class Real>
Tensor<Real> sparse_matmul(std::shared_ptr<const SparseMatrix<Real>> s,
                           const Tensor<Real>& x) {
  if (s->cols != x.rows())
    throw ShapeMismatch("sparse_matmul: " + std::to_string(s->rows) + "x" +
                        std::to_string(s->cols) + " . " +
                        shape_str(x.shape()));
  const std::size_t d = detail::row_width(x);
  std::vector<Real> out(s->rows * d, Real(0));
  const auto xv = x.values();
  for (std::size_t e = 0; e < s->weight.size(); ++e) {
    const Real w = s->weight[e];
    const Real* src = xv.data() + s->col_index[e] * d;
    Real* dst = out.data() + s->row_index[e] * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
  }
  auto xn = x.handle();
  return detail::make_result<Real>(
      "sparse_matmul", detail::with_rows(x, s->rows), std::move(out),
      x.requires_grad(), [xn, s, d](Node<Real>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t e = 0; e < s->weight.size(); ++e) {
          const Real w = s->weight[e];
          const Real* src = self.grad.data() + s->row_index[e] * d;
          Real* dst = g.data() + s->col_index[e] * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
        }
      });
}

/// Stable binary cross-entropy from logits, elementwise:
/// softplus(z) - y*z == max(z,0) - z*y + log(1 + exp(-|z|)).
template <class Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& logits,
                             const Tensor<Real>& labels) {
  return detail::binary<Real>(
      "bce", logits, labels,
      [](Real z, Real y) {
        return std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
      },
      [](Real z, Real y, Real) { return sigmoid_value(z) - y; },
      [](Real z, Real, Real) { return -z; });
}

}  // namespace moce::ad
