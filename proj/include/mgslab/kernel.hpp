#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mgslab/differentiation.hpp"
#include "mgslab/error.hpp"
#include "mgslab/graph.hpp"
#include "mgslab/linalg.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab {

inline constexpr double kDefaultRankTol = 1e-10;

/// Gradient Gram matrix of a batch: (m*q x m*q), entry ((i,c),(j,d)) = grad f_c(x_i) . grad f_d(x_j).
class GradientKernel {
 public:
  GradientKernel(Tensor matrix, std::size_t batch_size, std::size_t num_outputs)
      : matrix_(std::move(matrix)), m_(batch_size), q_(num_outputs) {
    const std::size_t n = m_ * q_;
    if (matrix_.rank() != 2 || matrix_.dim(0) != n || matrix_.dim(1) != n) {
      throw ShapeError("kernel", "expected a " + std::to_string(n) + "x" + std::to_string(n) + " matrix, got " +
                                     shape_string(matrix_.shape()));
    }
    if (!matrix_.all_finite()) throw NumericalError("kernel matrix has non-finite entries");
    double scale = 0.0, asym = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        scale = std::max(scale, std::abs(matrix_(a, b)));
        asym = std::max(asym, std::abs(matrix_(a, b) - matrix_(b, a)));
      }
    }
    if (asym > 1e-10 * std::max(scale, 1.0)) {
      throw NumericalError("kernel matrix is not symmetric (max asymmetry " + std::to_string(asym) + ")");
    }
  }

  const Tensor& matrix() const noexcept { return matrix_; }
  std::size_t batch_size() const noexcept { return m_; }
  std::size_t num_outputs() const noexcept { return q_; }
  std::size_t size() const noexcept { return m_ * q_; }

  /// Descending eigenvalues, computed once.
  const std::vector<double>& spectrum() const {
    if (!spectrum_) spectrum_ = linalg::symmetric_eigenvalues(matrix_);
    return *spectrum_;
  }

 private:
  Tensor matrix_;
  std::size_t m_;
  std::size_t q_;
  mutable std::optional<std::vector<double>> spectrum_;
};

inline GradientKernel mgs_kernel(const PerSampleJacobian& J) {
  const Tensor& a = J.matrix;
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    for (std::size_t c = 0; c < a.dim(1); ++c) {
      if (!std::isfinite(a(r, c))) {
        throw NumericalError("Jacobian entry (" + std::to_string(r) + ", " + std::to_string(c) + ") is not finite");
      }
    }
  }
  const std::size_t n = a.dim(0);
  Tensor k({n, n});
  ad::detail::gemm(a.data().data(), n, a.dim(1), false, a.data().data(), n, a.dim(1), true, k.data().data());
  // Exact symmetry regardless of how the product was blocked.
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) k(c, r) = k(r, c);
  }
  return GradientKernel(std::move(k), J.batch_size, J.num_outputs);
}

/// Kernel of a batch from the batched Jacobian pass, without forming J.
inline GradientKernel batch_kernel(const Graph& graph, const ParamVector& params, const Tensor& inputs,
                                   const DropoutContext& dropout = {}) {
  Tensor k = batch_kernel_matrix(graph, params, inputs, dropout);
  return GradientKernel(std::move(k), inputs.rows(), graph.num_outputs());
}

inline double trace_metric(const GradientKernel& K) {
  double s = 0.0;
  for (std::size_t i = 0; i < K.size(); ++i) s += K.matrix()(i, i);
  return s;
}

/// Sum of squared row norms; K is never formed.
inline double trace_metric(const PerSampleJacobian& J) {
  double s = 0.0;
  for (double v : J.matrix.data()) s += v * v;
  return s;
}

/// Sum of log-eigenvalues, or nothing when lambda_min <= rank_tol * lambda_max.
inline std::optional<double> logdet_metric(const GradientKernel& K, double rank_tol = kDefaultRankTol) {
  if (!(rank_tol > 0.0)) throw ConfigError("rank_tol must be positive");
  const auto& ev = K.spectrum();
  if (ev.empty() || !(ev.front() > 0.0) || !(ev.back() > rank_tol * ev.front())) return std::nullopt;
  double s = 0.0;
  for (double l : ev) s += std::log(l);
  return s;
}

inline std::vector<double> spectrum(const GradientKernel& K) { return K.spectrum(); }

/// First-order change of the outputs after one gradient step: -eta * K * dL/df.
/// `loss_model_grads` are derivatives of the batch loss (already carrying any 1/m factor).
inline Tensor predicted_update(const GradientKernel& K, const Tensor& loss_model_grads, double eta) {
  const std::size_t n = K.size();
  if (loss_model_grads.size() != n) {
    throw ShapeError("predicted_update", "loss-model gradients have " + std::to_string(loss_model_grads.size()) +
                                             " entries, kernel expects " + std::to_string(n));
  }
  Tensor out(loss_model_grads.shape());
  for (std::size_t a = 0; a < n; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) s += K.matrix()(a, b) * loss_model_grads[b];
    out[a] = -eta * s;
  }
  return out;
}

/// m x m kernel summed over matching outputs: sum_c K[(i,c),(j,c)].
inline Tensor output_summed(const GradientKernel& K) {
  const std::size_t m = K.batch_size(), q = K.num_outputs();
  Tensor out({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < q; ++c) s += K.matrix()(i * q + c, j * q + c);
      out(i, j) = s;
    }
  }
  return out;
}

/// Cosine between an m x m kernel and Y Y^T (Y one-hot) in the Frobenius inner product.
inline std::optional<double> alignment(const Tensor& kernel_mm, const Tensor& labels) {
  const std::size_t m = kernel_mm.dim(0);
  if (kernel_mm.rank() != 2 || kernel_mm.dim(1) != m || labels.size() != m) {
    throw ShapeError("alignment", "kernel " + shape_string(kernel_mm.shape()) + " vs " +
                                      std::to_string(labels.size()) + " labels");
  }
  double inner = 0.0, kk = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double y = labels[i] == labels[j] ? 1.0 : 0.0;
      inner += kernel_mm(i, j) * y;
      kk += kernel_mm(i, j) * kernel_mm(i, j);
      yy += y;
    }
  }
  if (kk == 0.0) return std::nullopt;
  return inner / (std::sqrt(kk) * std::sqrt(yy));
}

inline std::optional<double> alignment(const GradientKernel& K, const Tensor& labels) {
  return alignment(output_summed(K), labels);
}

/// Trace of the batch kernel as an out-of-distribution score.
inline double anomaly_score(const Graph& graph, const ParamVector& params, const Tensor& inputs) {
  return trace_metric(per_sample_jacobian(graph, params, inputs));
}

// ---------------------------------------------------------------------------
// Gram / scatter spectra

struct ScatterPair {
  Tensor gram;     // J J^T
  Tensor scatter;  // J^T J
  Tensor centred;  // (J - mean)^T (J - mean), mean taken over rows
};

inline ScatterPair scatter_pair(const Tensor& J) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto d = static_cast<Eigen::Index>(J.dim(0)), n = static_cast<Eigen::Index>(J.dim(1));
  Eigen::Map<const Mat> a(J.data().data(), d, n);
  Mat c = a.rowwise() - a.colwise().mean();
  auto to_tensor = [](const Mat& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<Mat>(t.data().data(), m.rows(), m.cols()) = m;
    return t;
  };
  return {to_tensor(a * a.transpose()), to_tensor(a.transpose() * a), to_tensor(c.transpose() * c)};
}

struct InterlacingReport {
  std::vector<double> gram_eigs;
  std::vector<double> scatter_eigs;
  std::vector<double> centred_eigs;
  double spectrum_mismatch = 0.0;       // max relative difference of shared non-zero eigenvalues
  double interlacing_violation = 0.0;   // largest breach of lambda_{j+1} <= centred_j <= lambda_j, over lambda_max
  bool ok(double rel_tol = 1e-8, double slack = 1e-10) const {
    return spectrum_mismatch <= rel_tol && interlacing_violation <= slack;
  }
};

/// Checks that J J^T and J^T J share their non-zero spectrum and that centring the scatter
/// matrix interlaces its eigenvalues with the uncentred ones.
inline InterlacingReport interlacing_check(const Tensor& J, double zero_tol = 1e-10) {
  if (J.rank() != 2 || J.dim(0) < 2 || J.dim(1) == 0) {
    throw ShapeError("interlacing_check", "needs a matrix with at least 2 rows, got " + shape_string(J.shape()));
  }
  const ScatterPair s = scatter_pair(J);
  InterlacingReport r;
  r.gram_eigs = linalg::symmetric_eigenvalues(s.gram);
  r.scatter_eigs = linalg::symmetric_eigenvalues(s.scatter);
  r.centred_eigs = linalg::symmetric_eigenvalues(s.centred);

  const double top = std::max({r.gram_eigs.front(), r.scatter_eigs.front(), 0.0});
  const double floor = zero_tol * std::max(top, 1.0);
  const std::size_t shared = std::min(r.gram_eigs.size(), r.scatter_eigs.size());
  for (std::size_t j = 0; j < shared; ++j) {
    const double a = r.gram_eigs[j], b = r.scatter_eigs[j];
    if (std::abs(a) <= floor && std::abs(b) <= floor) continue;
    r.spectrum_mismatch = std::max(r.spectrum_mismatch, std::abs(a - b) / std::max(std::abs(a), std::abs(b)));
  }
  // Whichever matrix is larger carries only zeros beyond the shared part.
  const auto& longer = r.gram_eigs.size() > shared ? r.gram_eigs : r.scatter_eigs;
  for (std::size_t j = shared; j < longer.size(); ++j) {
    if (std::abs(longer[j]) > floor) r.spectrum_mismatch = std::max(r.spectrum_mismatch, 1.0);
  }

  const double norm = std::max(top, 1.0);
  const auto& u = r.scatter_eigs;
  const auto& c = r.centred_eigs;
  for (std::size_t j = 0; j < c.size(); ++j) {
    r.interlacing_violation = std::max(r.interlacing_violation, (c[j] - u[j]) / norm);
    if (j + 1 < u.size()) r.interlacing_violation = std::max(r.interlacing_violation, (u[j + 1] - c[j]) / norm);
  }
  return r;
}

}  // namespace mgslab
