#pragma once

// Tensor-level reverse-mode automatic differentiation.
//
// Every primitive writes its vector-Jacobian product in terms of other primitives, so a
// backward pass run with `create_graph = true` is itself a differentiable graph. This is
// what the gradient-norm and kernel penalties rely on: their values contain first
// derivatives, and the optimiser needs the derivative of those.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mgslab/error.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab::ad {

class Var;

namespace detail {

struct Node;

using BackwardFn = std::function<std::vector<Var>(const Var& grad, const std::vector<Var>& inputs)>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Scoped switch for graph recording.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_mode_flag() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Handle to a value in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad = true);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend Var make_op(Tensor, std::vector<Var>, detail::BackwardFn);
};

namespace detail {
struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};
}  // namespace detail

inline Var Var::constant(Tensor value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

inline const Tensor& Var::value() const {
  if (!node_) throw Error("access to an undefined Var");
  return node_->value;
}

inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }

/// Create an op node. The backward function and inputs are only retained when recording is
/// on and at least one input requires a gradient.
inline Var make_op(Tensor value, std::vector<Var> inputs, detail::BackwardFn backward) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      n->inputs = std::move(inputs);
      n->backward = std::move(backward);
      n->requires_grad = true;
    }
  }
  return Var(std::move(n));
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError("", std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError("", std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_string(a.shape()));
  }
}

template <typename F>
Tensor map_unary(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F&& f) {
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

// C (rows x cols) = op(A) op(B) for row-major A, B.
inline void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b,
                 std::size_t br, std::size_t bc, bool tb, double* c) {
  CMatMap A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  CMatMap B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  const std::size_t rows = ta ? ac : ar;
  const std::size_t cols = tb ? br : bc;
  MatMap C(c, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var fill(const Var& scalar, const Shape& shape);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return make_op(detail::map_binary(a.value(), b.value(), std::plus<>()), {a, b},
                 [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return make_op(detail::map_binary(a.value(), b.value(), std::minus<>()), {a, b},
                 [](const Var& g, const std::vector<Var>&) {
                   return std::vector<Var>{g, scale(g, -1.0)};
                 });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  return make_op(detail::map_binary(a.value(), b.value(), std::multiplies<>()), {a, b},
                 [](const Var& g, const std::vector<Var>& in) {
                   return std::vector<Var>{in[0].requires_grad() ? mul(g, in[1]) : Var{},
                                           in[1].requires_grad() ? mul(g, in[0]) : Var{}};
                 });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  return make_op(detail::map_binary(a.value(), b.value(), std::divides<>()), {a, b},
                 [](const Var& g, const std::vector<Var>& in) {
                   Var ga = div(g, in[1]);
                   Var gb;
                   if (in[1].requires_grad()) gb = scale(mul(ga, div(in[0], in[1])), -1.0);
                   return std::vector<Var>{in[0].requires_grad() ? ga : Var{}, gb};
                 });
}

inline Var scale(const Var& a, double s) {
  return make_op(detail::map_unary(a.value(), [s](double x) { return s * x; }), {a},
                 [s](const Var& g, const std::vector<Var>&) { return std::vector<Var>{scale(g, s)}; });
}

/// a + s elementwise, s a constant.
inline Var add_scalar(const Var& a, double s) {
  return make_op(detail::map_unary(a.value(), [s](double x) { return x + s; }), {a},
                 [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{g}; });
}

/// a * m elementwise with m held constant (ReLU and dropout masks).
inline Var mul_const(const Var& a, std::shared_ptr<const Tensor> m) {
  if (m->shape() != a.shape()) {
    throw ShapeError("", "mul_const: shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(m->shape()));
  }
  return make_op(detail::map_binary(a.value(), *m, std::multiplies<>()), {a},
                 [m](const Var& g, const std::vector<Var>&) { return std::vector<Var>{mul_const(g, m)}; });
}

inline Var exp(const Var& a) {
  return make_op(detail::map_unary(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Var& g, const std::vector<Var>& in) {
                   return std::vector<Var>{mul(g, exp(in[0]))};
                 });
}

inline Var log(const Var& a) {
  return make_op(detail::map_unary(a.value(), [](double x) { return std::log(x); }), {a},
                 [](const Var& g, const std::vector<Var>& in) { return std::vector<Var>{div(g, in[0])}; });
}

inline Var sqrt(const Var& a) {
  return make_op(detail::map_unary(a.value(), [](double x) { return std::sqrt(x); }), {a},
                 [](const Var& g, const std::vector<Var>& in) {
                   return std::vector<Var>{div(scale(g, 0.5), sqrt(in[0]))};
                 });
}

inline Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// Reductions and broadcasts. Each pair below is mutually adjoint.

/// Sum of all entries, rank-0 result.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  Shape shape = a.shape();
  return make_op(Tensor::scalar(s), {a}, [shape](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{fill(g, shape)};
  });
}

/// Broadcast a single-entry tensor to `shape`.
inline Var fill(const Var& scalar, const Shape& shape) {
  if (scalar.size() != 1) throw ShapeError("", "fill: source must hold one value");
  return make_op(Tensor(shape, scalar.value()[0]), {scalar},
                 [src = scalar.shape()](const Var& g, const std::vector<Var>&) {
                   return std::vector<Var>{reshape(sum(g), src)};
                 });
}

Var broadcast_cols(const Var& v, std::size_t cols);
Var broadcast_rows(const Var& v, std::size_t rows);

/// (R x C) -> (R x 1) sums along each row.
inline Var row_sum(const Var& a) {
  detail::require_rank(a, 2, "row_sum");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.value()(i, j);
    out[i] = s;
  }
  return make_op(std::move(out), {a}, [c](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{broadcast_cols(g, c)};
  });
}

/// (R x 1) -> (R x C), copying each row value across columns.
inline Var broadcast_cols(const Var& v, std::size_t cols) {
  detail::require_rank(v, 2, "broadcast_cols");
  if (v.dim(1) != 1) throw ShapeError("", "broadcast_cols: source must be a column");
  const std::size_t r = v.dim(0);
  Tensor out({r, cols});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = v.value()[i];
  }
  return make_op(std::move(out), {v}, [](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{row_sum(g)};
  });
}

/// (R x C) -> (C) column sums.
inline Var sum_rows(const Var& a) {
  detail::require_rank(a, 2, "sum_rows");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j] += a.value()(i, j);
  }
  return make_op(std::move(out), {a}, [r](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{broadcast_rows(g, r)};
  });
}

/// (C) -> (R x C), copying the vector into every row.
inline Var broadcast_rows(const Var& v, std::size_t rows) {
  detail::require_rank(v, 1, "broadcast_rows");
  const std::size_t c = v.dim(0);
  Tensor out({rows, c});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(v.value().data().begin(), v.value().data().end(), out.data().begin() + i * c);
  }
  return make_op(std::move(out), {v}, [](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{sum_rows(g)};
  });
}

/// a (R x C) + b (C) broadcast over rows.
inline Var add_row_vector(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "add_row_vector");
  detail::require_rank(b, 1, "add_row_vector");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (b.dim(0) != c) {
    throw ShapeError("", "add_row_vector: " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) += b.value()[j];
  }
  return make_op(std::move(out), {a, b}, [](const Var& g, const std::vector<Var>& in) {
    return std::vector<Var>{g, in[1].requires_grad() ? sum_rows(g) : Var{}};
  });
}

Var sum_groups(const Var& a, std::size_t q);

/// Repeat each leading-dimension slice q times in place: slice i lands at i*q .. i*q+q-1.
inline Var repeat_rows(const Var& a, std::size_t q) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows();
  const std::size_t block = n == 0 ? 0 : x.size() / n;
  Shape s = x.shape();
  s[0] = n * q;
  Tensor out(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < q; ++t) {
      std::copy(x.data().begin() + i * block, x.data().begin() + (i + 1) * block,
                out.data().begin() + (i * q + t) * block);
    }
  }
  return make_op(std::move(out), {a}, [q](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{sum_groups(g, q)};
  });
}

/// Sum consecutive groups of q leading-dimension slices.
inline Var sum_groups(const Var& a, std::size_t q) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows();
  if (q == 0 || n % q != 0) {
    throw ShapeError("", "sum_groups: leading dimension " + std::to_string(n) + " not divisible by " +
                             std::to_string(q));
  }
  const std::size_t block = n == 0 ? 0 : x.size() / n;
  Shape s = x.shape();
  s[0] = n / q;
  Tensor out(s);
  for (std::size_t i = 0; i < n; ++i) {
    double* dst = out.data().data() + (i / q) * block;
    const double* src = x.data().data() + i * block;
    for (std::size_t k = 0; k < block; ++k) dst[k] += src[k];
  }
  return make_op(std::move(out), {a}, [q](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{repeat_rows(g, q)};
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Shape original = a.shape();
  return make_op(a.value().reshaped(std::move(shape)), {a}, [original](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{reshape(g, original)};
  });
}

// ---------------------------------------------------------------------------
// Matrix products

/// op(a) * op(b) for rank-2 operands, or batched over the leading dimension for rank-3
/// operands with equal batch counts. `ta`/`tb` transpose the trailing two dimensions.
inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != B.rank() || (A.rank() != 2 && A.rank() != 3)) {
    throw ShapeError("", "matmul: unsupported ranks " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  const bool batched = A.rank() == 3;
  const std::size_t nb = batched ? A.dim(0) : 1;
  if (batched && B.dim(0) != nb) {
    throw ShapeError("", "matmul: batch mismatch " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  const std::size_t o = batched ? 1 : 0;
  const std::size_t ar = A.dim(o), ac = A.dim(o + 1), br = B.dim(o), bc = B.dim(o + 1);
  const std::size_t inner_a = ta ? ar : ac;
  const std::size_t inner_b = tb ? bc : br;
  if (inner_a != inner_b) {
    throw ShapeError("", "matmul: inner dimensions differ " + shape_string(A.shape()) +
                             (ta ? "^T" : "") + " x " + shape_string(B.shape()) + (tb ? "^T" : ""));
  }
  const std::size_t rows = ta ? ac : ar;
  const std::size_t cols = tb ? br : bc;
  Tensor out(batched ? Shape{nb, rows, cols} : Shape{rows, cols});
  for (std::size_t k = 0; k < nb; ++k) {
    detail::gemm(A.data().data() + k * ar * ac, ar, ac, ta, B.data().data() + k * br * bc, br, bc, tb,
                 out.data().data() + k * rows * cols);
  }
  return make_op(std::move(out), {a, b}, [ta, tb](const Var& g, const std::vector<Var>& in) {
    const Var& x = in[0];
    const Var& y = in[1];
    Var gx, gy;
    const bool nx = x.requires_grad(), ny = y.requires_grad();
    if (!ta && !tb) {
      if (nx) gx = matmul(g, y, false, true);
      if (ny) gy = matmul(x, g, true, false);
    } else if (ta && !tb) {
      if (nx) gx = matmul(y, g, false, true);
      if (ny) gy = matmul(x, g, false, false);
    } else if (!ta && tb) {
      if (nx) gx = matmul(g, y, false, false);
      if (ny) gy = matmul(g, x, true, false);
    } else {
      if (nx) gx = matmul(y, g, true, true);
      if (ny) gy = matmul(g, x, true, true);
    }
    return std::vector<Var>{gx, gy};
  });
}

// ---------------------------------------------------------------------------
// Image ops on (n x H*W*C) activations stored as row-major (n, H, W, C).

struct ConvGeometry {
  std::size_t height = 0, width = 0, channels = 0, kernel = 0;
  std::size_t out_height() const { return height - kernel + 1; }
  std::size_t out_width() const { return width - kernel + 1; }
  std::size_t positions() const { return out_height() * out_width(); }
  std::size_t patch() const { return kernel * kernel * channels; }
  std::size_t image() const { return height * width * channels; }
};

Var col2im(const Var& cols, const ConvGeometry& geo);

/// Valid, stride-1 patch extraction: (n x H*W*C) -> (n*OH*OW x K*K*C), patch order (kh, kw, c).
inline Var im2col(const Var& x, const ConvGeometry& geo) {
  detail::require_rank(x, 2, "im2col");
  if (x.dim(1) != geo.image()) throw ShapeError("", "im2col: feature count does not match geometry");
  const std::size_t n = x.dim(0), oh = geo.out_height(), ow = geo.out_width(), k = geo.kernel, c = geo.channels;
  Tensor out({n * geo.positions(), geo.patch()});
  const double* src = x.value().data().data();
  double* dst = out.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    const double* img = src + s * geo.image();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const double* row = img + ((y + ky) * geo.width + xx) * c;
          std::copy(row, row + k * c, dst);
          dst += k * c;
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [geo](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{col2im(g, geo)};
  });
}

/// Adjoint of im2col: scatter-add patches back into images.
inline Var col2im(const Var& cols, const ConvGeometry& geo) {
  detail::require_rank(cols, 2, "col2im");
  if (cols.dim(1) != geo.patch() || cols.dim(0) % geo.positions() != 0) {
    throw ShapeError("", "col2im: column matrix does not match geometry");
  }
  const std::size_t n = cols.dim(0) / geo.positions(), oh = geo.out_height(), ow = geo.out_width(),
                    k = geo.kernel, c = geo.channels;
  Tensor out({n, geo.image()});
  const double* src = cols.value().data().data();
  double* dst = out.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    double* img = dst + s * geo.image();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          double* row = img + ((y + ky) * geo.width + xx) * c;
          for (std::size_t t = 0; t < k * c; ++t) row[t] += src[t];
          src += k * c;
        }
      }
    }
  }
  return make_op(std::move(out), {cols}, [geo](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{im2col(g, geo)};
  });
}

struct PoolGeometry {
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t in_size() const { return height * width * channels; }
  std::size_t out_size() const { return (height / 2) * (width / 2) * channels; }
};

Var avg_unpool2(const Var& x, const PoolGeometry& geo);

/// 2x2 stride-2 average pooling.
inline Var avg_pool2(const Var& x, const PoolGeometry& geo) {
  detail::require_rank(x, 2, "avg_pool2");
  if (x.dim(1) != geo.in_size()) throw ShapeError("", "avg_pool2: feature count does not match geometry");
  const std::size_t n = x.dim(0), oh = geo.height / 2, ow = geo.width / 2, c = geo.channels;
  Tensor out({n, geo.out_size()});
  for (std::size_t s = 0; s < n; ++s) {
    const double* img = x.value().data().data() + s * geo.in_size();
    double* o = out.data().data() + s * geo.out_size();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const auto at = [&](std::size_t yy, std::size_t xi) { return img[(yy * geo.width + xi) * c + ch]; };
          o[(y * ow + xx) * c + ch] =
              0.25 * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [geo](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{avg_unpool2(g, geo)};
  });
}

/// Adjoint of avg_pool2.
inline Var avg_unpool2(const Var& x, const PoolGeometry& geo) {
  detail::require_rank(x, 2, "avg_unpool2");
  if (x.dim(1) != geo.out_size()) throw ShapeError("", "avg_unpool2: feature count does not match geometry");
  const std::size_t n = x.dim(0), oh = geo.height / 2, ow = geo.width / 2, c = geo.channels;
  Tensor out({n, geo.in_size()});
  for (std::size_t s = 0; s < n; ++s) {
    const double* src = x.value().data().data() + s * geo.out_size();
    double* img = out.data().data() + s * geo.in_size();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = 0.25 * src[(y * ow + xx) * c + ch];
          img[((2 * y) * geo.width + 2 * xx) * c + ch] = v;
          img[((2 * y) * geo.width + 2 * xx + 1) * c + ch] = v;
          img[((2 * y + 1) * geo.width + 2 * xx) * c + ch] = v;
          img[((2 * y + 1) * geo.width + 2 * xx + 1) * c + ch] = v;
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [geo](const Var& g, const std::vector<Var>&) {
    return std::vector<Var>{avg_pool2(g, geo)};
  });
}

// ---------------------------------------------------------------------------
// Composite helpers

/// Row-wise squared norms: (R x C) -> (R x 1).
inline Var row_sumsq(const Var& a) { return row_sum(mul(a, a)); }

/// Row-wise log-softmax of (R x C) logits, built from differentiable primitives.
inline Var log_softmax_rows(const Var& z) {
  detail::require_rank(z, 2, "log_softmax_rows");
  const std::size_t r = z.dim(0), c = z.dim(1);
  Tensor shift({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double m = z.value()(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z.value()(i, j));
    for (std::size_t j = 0; j < c; ++j) shift(i, j) = m;
  }
  Var s = sub(z, Var::constant(std::move(shift)));
  Var lse = log(row_sum(exp(s)));
  return sub(s, broadcast_cols(lse, c));
}

// ---------------------------------------------------------------------------
// Backward pass

/// Gradients of a single-entry `output` with respect to each of `wrt`. With `create_graph`
/// the returned Vars are themselves differentiable. Unreached inputs get zero tensors.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph = false) {
  if (output.size() != 1) throw ShapeError("", "grad: output must hold a single value");
  GradModeGuard mode(create_graph);

  std::vector<detail::Node*> order;
  if (output.requires_grad()) {
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    seen.insert(output.node().get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        detail::Node* child = n->inputs[next++].node().get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<const detail::Node*> targets;
  for (const Var& w : wrt) {
    if (w.defined()) targets.insert(w.node().get());
  }

  std::unordered_map<const detail::Node*, Var> grads;
  if (output.requires_grad()) grads[output.node().get()] = Var::constant(Tensor(output.shape(), 1.0));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    if (!n->backward) continue;
    Var g = found->second;
    if (!targets.contains(n)) grads.erase(found);
    std::vector<Var> in_grads = n->backward(g, n->inputs);
    for (std::size_t k = 0; k < n->inputs.size(); ++k) {
      const Var& input = n->inputs[k];
      if (!input.requires_grad() || !in_grads[k].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(input.node().get(), in_grads[k]);
      if (!inserted) slot->second = add(slot->second, in_grads[k]);
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = grads.find(w.node().get());
    if (found != grads.end()) out.push_back(found->second);
    else out.push_back(Var::constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

}  // namespace mgslab::ad
