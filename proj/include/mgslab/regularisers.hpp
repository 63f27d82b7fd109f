#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>

#include "mgslab/differentiation.hpp"
#include "mgslab/error.hpp"
#include "mgslab/kernel.hpp"

namespace mgslab {

enum class RegulariserKind { none, weight, dropout, lossgrad_param, lossgrad_input, mgs_trace, mgs_logdet };

inline constexpr RegulariserKind kAllRegularisers[] = {
    RegulariserKind::none,           RegulariserKind::weight,    RegulariserKind::dropout,
    RegulariserKind::lossgrad_param, RegulariserKind::lossgrad_input, RegulariserKind::mgs_trace,
    RegulariserKind::mgs_logdet};

inline std::string_view to_string(RegulariserKind k) {
  switch (k) {
    case RegulariserKind::none: return "none";
    case RegulariserKind::weight: return "weight";
    case RegulariserKind::dropout: return "dropout";
    case RegulariserKind::lossgrad_param: return "lossgrad-param";
    case RegulariserKind::lossgrad_input: return "lossgrad-input";
    case RegulariserKind::mgs_trace: return "mgs-trace";
    case RegulariserKind::mgs_logdet: return "mgs-logdet";
  }
  return "?";
}

inline RegulariserKind parse_regulariser(std::string_view s) {
  for (auto k : kAllRegularisers) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown regulariser '" + std::string(s) +
                    "' (expected none, weight, dropout, lossgrad-param, lossgrad-input, mgs-trace or mgs-logdet)");
}

/// One regulariser per run. For dropout, `alpha` is the drop rate.
struct RegulariserConfig {
  RegulariserKind kind = RegulariserKind::none;
  double alpha = 0.0;

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be a finite value >= 0");
    if (kind == RegulariserKind::dropout && !(alpha < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  }
  double dropout_rate() const { return kind == RegulariserKind::dropout ? alpha : 0.0; }
  /// The loss term this regulariser adds, if any (dropout and none add nothing).
  std::optional<PenaltyKind> penalty() const {
    switch (kind) {
      case RegulariserKind::weight: return PenaltyKind::weight;
      case RegulariserKind::lossgrad_param: return PenaltyKind::lossgrad_param;
      case RegulariserKind::lossgrad_input: return PenaltyKind::lossgrad_input;
      case RegulariserKind::mgs_trace: return PenaltyKind::mgs_trace;
      case RegulariserKind::mgs_logdet: return PenaltyKind::mgs_logdet;
      default: return std::nullopt;
    }
  }
};

inline double weight_penalty(const ParamVector& params, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  return alpha * params.squared_norm();
}

inline ParamVector weight_penalty_gradient(const ParamVector& params, double alpha) {
  ParamVector g = params;
  for (double& v : g.values()) v *= 2.0 * alpha;
  return g;
}

inline double lossgrad_param_penalty(const Graph& graph, const ParamVector& params, const Batch& batch, LossKind loss,
                                     double alpha) {
  return penalty_value(graph, params, batch, PenaltyKind::lossgrad_param, alpha, {.loss = loss});
}

inline double lossgrad_input_penalty(const Graph& graph, const ParamVector& params, const Batch& batch, LossKind loss,
                                     double alpha) {
  return penalty_value(graph, params, batch, PenaltyKind::lossgrad_input, alpha, {.loss = loss});
}

/// Targets are not needed; the kernel depends on inputs only.
inline double mgs_trace_penalty(const Graph& graph, const ParamVector& params, const Tensor& inputs, double alpha,
                                const DropoutContext& dropout = {}) {
  ad::NoGradGuard ng;
  auto bound = bind_params(graph, params, false);
  auto trace = run_forward(graph, bound, ad::Var::constant(mgslab::detail::as_matrix(inputs)), dropout);
  return alpha * kernel_trace(jacobian_pass(graph, bound, trace)).item();
}

/// Throws SingularKernelError when the kernel is numerically singular.
inline double mgs_logdet_penalty(const Graph& graph, const ParamVector& params, const Tensor& inputs, double alpha,
                                 const DropoutContext& dropout = {}, double rank_tol = kDefaultRankTol) {
  GradientKernel K = batch_kernel(graph, params, inputs, dropout);
  auto ld = logdet_metric(K, rank_tol);
  if (!ld) throw SingularKernelError(K.spectrum().back(), K.spectrum().front(), dropout.step);
  return alpha * *ld;
}

/// Both sides of ||grad_theta L|| <= ||grad_theta f||_F * ||grad_f L||.
struct LossGradBound {
  double lhs = 0.0;
  double rhs = 0.0;
  double slack() const { return rhs - lhs; }
};

inline LossGradBound lossgrad_bound(const Graph& graph, const ParamVector& params, const Batch& batch, LossKind loss) {
  const auto lg = loss_and_grad(graph, params, batch, loss);
  const auto J = per_sample_jacobian(graph, params, batch.inputs);
  const Tensor out = forward(graph, params, batch.inputs);
  const Tensor g = loss_model_gradients(out, batch.targets, loss);
  const double m = static_cast<double>(batch.size());
  double gf = 0.0;
  for (double v : g.data()) gf += (v / m) * (v / m);
  return {std::sqrt(lg.grad.squared_norm()), std::sqrt(trace_metric(J)) * std::sqrt(gf)};
}

}  // namespace mgslab
