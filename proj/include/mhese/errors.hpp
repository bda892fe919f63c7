#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mhese {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter set violates its invariants (non-positive time constant,
/// singular stator matrix, bad base power, ...).
class InvalidParameters : public Error {
 public:
  using Error::Error;
};

/// Node, branch or channel reference that does not exist.
class OutOfRange : public Error {
 public:
  using Error::Error;
};

/// Iterative solver (power flow, DAE corrector) failed to converge.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double final_mismatch)
      : Error(what), final_mismatch_(final_mismatch) {}
  double final_mismatch() const { return final_mismatch_; }

 private:
  double final_mismatch_;
};

/// The Gauss-Newton KKT matrix is singular or numerically so.
class SingularKkt : public Error {
 public:
  SingularKkt(const std::string& what, double rcond)
      : Error(what), rcond_(rcond) {}
  double rcond() const { return rcond_; }

 private:
  double rcond_;
};

/// Static estimation on a measurement set that does not determine the state.
class Unobservable : public Error {
 public:
  Unobservable(const std::string& what, std::vector<int> removed = {})
      : Error(what), removed_(std::move(removed)) {}
  /// Residual rows removed by bad-data processing before the failure.
  const std::vector<int>& removed() const { return removed_; }

 private:
  std::vector<int> removed_;
};

/// Frames passed to the estimator do not fit the configured layout.
class DataMismatch : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration file or field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhese
