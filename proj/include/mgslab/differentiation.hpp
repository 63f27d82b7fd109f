#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mgslab/autodiff.hpp"
#include "mgslab/error.hpp"
#include "mgslab/graph.hpp"
#include "mgslab/linalg.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab {

enum class LossKind { mse, softmax_cross_entropy };

inline std::string_view to_string(LossKind k) {
  return k == LossKind::mse ? "mse" : "softmax-cross-entropy";
}

/// A batch of inputs (leading dimension m) with targets: class indices of shape (m) for
/// cross-entropy, or (m x q) values for mean-squared error.
struct Batch {
  Tensor inputs;
  Tensor targets;
  std::size_t size() const { return inputs.rows(); }
};

/// Rows of d f_c(x_i) / d theta; row (i*q + c).
struct PerSampleJacobian {
  Tensor matrix;  // (m*q x p)
  std::size_t batch_size = 0;
  std::size_t num_outputs = 0;
  std::size_t rows() const { return matrix.dim(0); }
  std::size_t cols() const { return matrix.dim(1); }
};

enum class PenaltyKind { weight, lossgrad_param, lossgrad_input, mgs_trace, mgs_logdet };

inline constexpr std::size_t kDefaultJacobianCap = std::size_t{2} << 30;  // 2 GiB

namespace detail {

inline Tensor as_matrix(const Tensor& inputs) {
  const std::size_t m = inputs.rows();
  return inputs.reshaped({m, m == 0 ? 0 : inputs.size() / m});
}

inline Tensor one_hot(const Tensor& labels, std::size_t m, std::size_t q) {
  if (labels.size() != m) {
    throw ShapeError("loss", "expected " + std::to_string(m) + " labels, got " + std::to_string(labels.size()));
  }
  Tensor y({m, q});
  for (std::size_t i = 0; i < m; ++i) {
    const double v = labels[i];
    if (!(v >= 0.0) || v != std::floor(v) || static_cast<std::size_t>(v) >= q) {
      throw ShapeError("loss", "label " + std::to_string(v) + " outside [0, " + std::to_string(q) + ")");
    }
    y(i, static_cast<std::size_t>(v)) = 1.0;
  }
  return y;
}

inline Tensor regression_targets(const Tensor& targets, std::size_t m, std::size_t q) {
  if (targets.size() != m * q) {
    throw ShapeError("loss", "expected " + std::to_string(m * q) + " regression targets, got " +
                                 std::to_string(targets.size()));
  }
  return targets.reshaped({m, q});
}

}  // namespace detail

/// Batch-mean loss of raw outputs `out` (m x q).
inline ad::Var loss_var(const ad::Var& out, const Tensor& targets, LossKind kind) {
  using namespace ad;
  const std::size_t m = out.dim(0), q = out.dim(1);
  if (kind == LossKind::mse) {
    Var d = sub(out, Var::constant(mgslab::detail::regression_targets(targets, m, q)));
    return scale(sum(square(d)), 1.0 / static_cast<double>(m));
  }
  auto y = std::make_shared<const Tensor>(mgslab::detail::one_hot(targets, m, q));
  return scale(sum(mul_const(log_softmax_rows(out), y)), -1.0 / static_cast<double>(m));
}

/// Per-sample loss-model gradients d l(f(x_i), y_i) / d f (not divided by m), (m x q).
inline Tensor loss_model_gradients(const Tensor& outputs, const Tensor& targets, LossKind kind) {
  const std::size_t m = outputs.dim(0), q = outputs.dim(1);
  Tensor g({m, q});
  if (kind == LossKind::mse) {
    const Tensor y = mgslab::detail::regression_targets(targets, m, q);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = 2.0 * (outputs[k] - y[k]);
    return g;
  }
  const Tensor y = mgslab::detail::one_hot(targets, m, q);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = outputs(i, 0);
    for (std::size_t c = 1; c < q; ++c) mx = std::max(mx, outputs(i, c));
    double z = 0.0;
    for (std::size_t c = 0; c < q; ++c) z += std::exp(outputs(i, c) - mx);
    for (std::size_t c = 0; c < q; ++c) g(i, c) = std::exp(outputs(i, c) - mx) / z - y(i, c);
  }
  return g;
}

/// Raw (pre-softmax) outputs, (m x q).
inline Tensor forward(const Graph& graph, const ParamVector& params, const Tensor& inputs,
                      const DropoutContext& dropout = {}) {
  ad::NoGradGuard ng;
  auto bound = bind_params(graph, params, false);
  return run_forward(graph, bound, ad::Var::constant(mgslab::detail::as_matrix(inputs)), dropout).output.value();
}

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

inline LossAndGrad loss_and_grad(const Graph& graph, const ParamVector& params, const Batch& batch, LossKind kind,
                                 const DropoutContext& dropout = {}) {
  auto bound = bind_params(graph, params);
  auto trace = run_forward(graph, bound, ad::Var::constant(mgslab::detail::as_matrix(batch.inputs)), dropout);
  ad::Var loss = loss_var(trace.output, batch.targets, kind);
  if (!std::isfinite(loss.item())) {
    throw NumericalError("non-finite loss " + std::to_string(loss.item()), dropout.step);
  }
  return {loss.item(), flatten_grads(graph, ad::grad(loss, bound.slots))};
}

struct JacobianOptions {
  std::size_t memory_cap = kDefaultJacobianCap;
  DropoutContext dropout{};
};

/// Explicit per-sample Jacobian. Each sample is propagated on its own so that its rows do
/// not depend on the rest of the batch.
inline PerSampleJacobian per_sample_jacobian(const Graph& graph, const ParamVector& params, const Tensor& inputs,
                                             const JacobianOptions& opts = {}) {
  const Tensor x = mgslab::detail::as_matrix(inputs);
  const std::size_t m = x.dim(0), q = graph.num_outputs(), p = graph.param_count();
  if (m == 0) throw ShapeError("input", "per_sample_jacobian needs at least one sample");
  const std::size_t bytes = m * q * p * sizeof(double);
  if (bytes > opts.memory_cap) throw MemoryBudgetError(bytes, opts.memory_cap);

  ad::NoGradGuard ng;
  auto bound = bind_params(graph, params, false);
  PerSampleJacobian J{Tensor({m * q, p}), m, q};
  for (std::size_t i = 0; i < m; ++i) {
    DropoutContext ctx = opts.dropout;
    ctx.sample_offset += i;
    auto trace = run_forward(graph, bound, ad::Var::constant(x.slice_rows(i, i + 1)), ctx);
    const Tensor rows = jacobian_rows(graph, jacobian_pass(graph, bound, trace));
    std::copy(rows.data().begin(), rows.data().end(), J.matrix.data().begin() + i * q * p);
  }
  if (!J.matrix.all_finite()) throw NumericalError("per-sample Jacobian has non-finite entries");
  return J;
}

/// Gradient Gram matrix of a batch, K = J J^T, computed from the batched Jacobian pass
/// without materialising J.
inline Tensor batch_kernel_matrix(const Graph& graph, const ParamVector& params, const Tensor& inputs,
                                  const DropoutContext& dropout = {}) {
  ad::NoGradGuard ng;
  auto bound = bind_params(graph, params, false);
  auto trace = run_forward(graph, bound, ad::Var::constant(mgslab::detail::as_matrix(inputs)), dropout);
  return kernel_matrix(jacobian_pass(graph, bound, trace)).value();
}

// ---------------------------------------------------------------------------
// Penalties

/// Log-determinant of a symmetric positive definite matrix through its eigenvalues.
/// The gradient is K^{-1}; it is treated as constant, so this op supports one level of
/// differentiation, which is all the penalty needs.
inline ad::Var logdet_spd(const ad::Var& k, const linalg::SymmetricEigen& eig) {
  double s = 0.0;
  for (double l : eig.values) s += std::log(l);
  auto inv = linalg::spectral_map(eig, [](double l) { return 1.0 / l; });
  auto kinv = std::make_shared<const Tensor>(std::move(inv));
  Shape shape = k.shape();
  return ad::make_op(Tensor::scalar(s), {k}, [kinv, shape](const ad::Var& g, const std::vector<ad::Var>&) {
    return std::vector<ad::Var>{ad::mul_const(ad::fill(g, shape), kinv)};
  });
}

/// Forward graph of one training step: bound parameters, input leaf, trace and loss.
struct StepGraph {
  BoundParams params;
  ad::Var input;
  ForwardTrace trace;
  ad::Var loss;
};

inline StepGraph build_step(const Graph& graph, const ParamVector& params, const Batch& batch, LossKind kind,
                            const DropoutContext& dropout = {}, bool input_requires_grad = false) {
  StepGraph s;
  s.params = bind_params(graph, params);
  s.input = ad::Var::leaf(mgslab::detail::as_matrix(batch.inputs), input_requires_grad);
  s.trace = run_forward(graph, s.params, s.input, dropout);
  s.loss = loss_var(s.trace.output, batch.targets, kind);
  return s;
}

struct PenaltyOptions {
  LossKind loss = LossKind::mse;
  DropoutContext dropout{};
  double rank_tol = 1e-10;
};

namespace detail {
inline ad::Var norm_or_zero(const std::vector<ad::Var>& parts) {
  using namespace ad;
  Var n2;
  for (const auto& g : parts) {
    Var s = sum(square(g));
    n2 = n2.defined() ? add(n2, s) : s;
  }
  // The norm is not differentiable at zero; use the zero subgradient there.
  if (!n2.defined() || n2.item() == 0.0) return Var::constant(Tensor::scalar(0.0));
  return sqrt(n2);
}
}  // namespace detail

/// Penalty scalar as a differentiable function of the step's parameters.
inline ad::Var penalty_var(const Graph& graph, const StepGraph& step, PenaltyKind kind, double alpha,
                           const PenaltyOptions& opts) {
  using namespace ad;
  switch (kind) {
    case PenaltyKind::weight: {
      Var total;
      for (const auto& p : step.params.slots) {
        Var s = sum(square(p));
        total = total.defined() ? add(total, s) : s;
      }
      return scale(total, alpha);
    }
    case PenaltyKind::lossgrad_param:
      return scale(mgslab::detail::norm_or_zero(grad(step.loss, step.params.slots, true)), alpha);
    case PenaltyKind::lossgrad_input: {
      if (!step.input.requires_grad()) throw ConfigError("lossgrad-input penalty needs an input leaf with gradients");
      return scale(mgslab::detail::norm_or_zero(grad(step.loss, {step.input}, true)), alpha);
    }
    case PenaltyKind::mgs_trace:
      return scale(kernel_trace(jacobian_pass(graph, step.params, step.trace)), alpha);
    case PenaltyKind::mgs_logdet: {
      Var k = kernel_matrix(jacobian_pass(graph, step.params, step.trace));
      auto eig = linalg::symmetric_eigen(k.value());
      const double hi = eig.values.front(), lo = eig.values.back();
      if (!(lo > opts.rank_tol * hi) || !(hi > 0.0)) throw SingularKernelError(lo, hi, opts.dropout.step);
      return scale(logdet_spd(k, eig), alpha);
    }
  }
  throw ConfigError("unknown penalty kind");
}

inline double penalty_value(const Graph& graph, const ParamVector& params, const Batch& batch, PenaltyKind kind,
                            double alpha, const PenaltyOptions& opts = {}) {
  auto step = build_step(graph, params, batch, opts.loss, opts.dropout, kind == PenaltyKind::lossgrad_input);
  return penalty_var(graph, step, kind, alpha, opts).item();
}

/// d g / d theta for penalty g, by differentiating through the first backward pass.
inline ParamVector penalty_gradient(const Graph& graph, const ParamVector& params, const Batch& batch,
                                    PenaltyKind kind, double alpha, const PenaltyOptions& opts = {}) {
  if (!(alpha > 0.0)) throw ConfigError("penalty factor alpha must be positive");
  auto step = build_step(graph, params, batch, opts.loss, opts.dropout, kind == PenaltyKind::lossgrad_input);
  ad::Var g = penalty_var(graph, step, kind, alpha, opts);
  return flatten_grads(graph, ad::grad(g, step.params.slots));
}

}  // namespace mgslab
