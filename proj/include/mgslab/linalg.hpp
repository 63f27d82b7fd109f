#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mgslab/error.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab::linalg {

/// Eigen-decomposition of a symmetric matrix. Values are sorted in descending order;
/// `vectors` is n x n row-major with eigenvector j stored in column j.
struct SymmetricEigen {
  std::vector<double> values;
  Tensor vectors;
};

namespace detail {

// Householder reduction to tridiagonal form. On exit `v` holds the accumulated
// orthogonal transform, `d` the diagonal and `e` the sub-diagonal (e[0] unused).
inline void tridiagonalize(std::vector<double>& v, std::size_t n, std::vector<double>& d,
                           std::vector<double>& e) {
  auto V = [&](std::size_t r, std::size_t c) -> double& { return v[r * n + c]; };
  for (std::size_t j = 0; j < n; ++j) d[j] = V(n - 1, j);

  for (std::size_t i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (std::size_t k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (std::size_t j = 0; j < i; ++j) {
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
        V(j, i) = 0.0;
      }
    } else {
      for (std::size_t k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (std::size_t j = 0; j < i; ++j) e[j] = 0.0;

      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        V(j, i) = f;
        g = e[j] + V(j, j) * f;
        for (std::size_t k = j + 1; k < i; ++k) {
          g += V(k, j) * d[k];
          e[k] += V(k, j) * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (std::size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (std::size_t k = j; k < i; ++k) V(k, j) -= (f * e[k] + g * d[k]);
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
      }
    }
    d[i] = h;
  }

  for (std::size_t i = 0; i + 1 < n; ++i) {
    V(n - 1, i) = V(i, i);
    V(i, i) = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      for (std::size_t k = 0; k <= i; ++k) d[k] = V(k, i + 1) / h;
      for (std::size_t j = 0; j <= i; ++j) {
        double g = 0.0;
        for (std::size_t k = 0; k <= i; ++k) g += V(k, i + 1) * V(k, j);
        for (std::size_t k = 0; k <= i; ++k) V(k, j) -= g * d[k];
      }
    }
    for (std::size_t k = 0; k <= i; ++k) V(k, i + 1) = 0.0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = V(n - 1, j);
    V(n - 1, j) = 0.0;
  }
  V(n - 1, n - 1) = 1.0;
  e[0] = 0.0;
}

// Implicit QL iteration with Wilkinson-style shifts on the tridiagonal (d, e).
inline void tridiagonal_ql(std::vector<double>& v, std::size_t n, std::vector<double>& d,
                           std::vector<double>& e, bool want_vectors, int max_iter) {
  auto V = [&](std::size_t r, std::size_t c) -> double& { return v[r * n + c]; };
  for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;

  double f = 0.0;
  double tst1 = 0.0;
  constexpr double eps = 0x1.0p-52;
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n) {
      if (std::abs(e[m]) <= eps * tst1) break;
      ++m;
    }
    if (m == n) m = n - 1;

    if (m > l) {
      int iter = 0;
      do {
        if (++iter > max_iter) {
          throw ConvergenceError("symmetric eigensolver exceeded " + std::to_string(max_iter) +
                                 " iterations for eigenvalue " + std::to_string(l));
        }
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;

        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (std::size_t ii = m; ii-- > l;) {
          const std::size_t i = ii;
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[i];
          h = c * p;
          r = std::hypot(p, e[i]);
          e[i + 1] = s * r;
          s = e[i] / r;
          c = p / r;
          p = c * d[i] - s * g;
          d[i + 1] = h + s * (c * g + s * d[i]);
          if (want_vectors) {
            for (std::size_t k = 0; k < n; ++k) {
              h = V(k, i + 1);
              V(k, i + 1) = s * V(k, i) + c * h;
              V(k, i) = c * V(k, i) - s * h;
            }
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }
}

}  // namespace detail

/// Symmetric eigen-decomposition by Householder tridiagonalisation followed by implicit QL.
/// The input is symmetrised as (A + A^T)/2 first.
inline SymmetricEigen symmetric_eigen(const Tensor& a, bool want_vectors = true, int max_iter = 60) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("", "symmetric_eigen needs a square matrix, got " + shape_string(a.shape()));
  }
  if (!a.all_finite()) throw NumericalError("symmetric_eigen: non-finite matrix entries");
  const std::size_t n = a.dim(0);
  SymmetricEigen out;
  if (n == 0) {
    out.vectors = Tensor({0, 0});
    return out;
  }
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = 0.5 * (a(i, j) + a(j, i));
  }
  std::vector<double> d(n), e(n);
  detail::tridiagonalize(v, n, d, e);
  detail::tridiagonal_ql(v, n, d, e, want_vectors, max_iter);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return d[x] > d[y]; });
  out.values.resize(n);
  for (std::size_t j = 0; j < n; ++j) out.values[j] = d[order[j]];
  if (want_vectors) {
    out.vectors = Tensor({n, n});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < n; ++j) out.vectors(r, j) = v[r * n + order[j]];
    }
  }
  return out;
}

/// Descending eigenvalues only.
inline std::vector<double> symmetric_eigenvalues(const Tensor& a) {
  return symmetric_eigen(a, false).values;
}

/// Q diag(f(lambda)) Q^T for a decomposition.
template <typename F>
Tensor spectral_map(const SymmetricEigen& eig, F&& f) {
  const std::size_t n = eig.values.size();
  Tensor out({n, n});
  std::vector<double> fl(n);
  for (std::size_t j = 0; j < n; ++j) fl[j] = f(eig.values[j]);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r; c < n; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += eig.vectors(r, j) * fl[j] * eig.vectors(c, j);
      out(r, c) = s;
      out(c, r) = s;
    }
  }
  return out;
}

}  // namespace mgslab::linalg
