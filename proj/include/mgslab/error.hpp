#pragma once

#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace mgslab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor or graph shapes. `node()` names the offending graph node when known.
class ShapeError : public Error {
 public:
  ShapeError(std::string node, const std::string& what)
      : Error(node.empty() ? what : "node '" + node + "': " + what), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

/// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values in a loss, update or matrix.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::size_t step = npos) : Error(what), step_(step) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

namespace detail {
inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace detail

/// A kernel that must be non-singular (penalty mode) is numerically singular.
class SingularKernelError : public NumericalError {
 public:
  SingularKernelError(double smallest, double largest, std::size_t step = npos)
      : NumericalError("singular kernel: smallest eigenvalue " + detail::fmt_g(smallest) + " (largest " +
                           detail::fmt_g(largest) + ")" +
                           (step == npos ? std::string() : " at step " + std::to_string(step)),
                       step),
        smallest_(smallest),
        largest_(largest) {}
  double smallest_eigenvalue() const noexcept { return smallest_; }
  double largest_eigenvalue() const noexcept { return largest_; }

 private:
  double smallest_;
  double largest_;
};

/// Iterative solver did not converge within its iteration cap.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// Explicit per-sample Jacobian would exceed the configured memory budget.
class MemoryBudgetError : public Error {
 public:
  MemoryBudgetError(std::size_t requested, std::size_t cap)
      : Error("per-sample Jacobian needs " + std::to_string(requested) + " bytes, cap is " +
              std::to_string(cap)),
        requested_(requested) {}
  std::size_t requested_bytes() const noexcept { return requested_; }

 private:
  std::size_t requested_;
};

/// Malformed or truncated input files.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace mgslab
