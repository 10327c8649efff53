#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace gmmcv {

/// Invalid dimensions, ranges or combinations of options.
class ConfigurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Observed data violates a model's support (e.g. nonpositive shares).
class DataError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Weighting matrix could not be formed without regularization.
class SingularWeightError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical solve failed. Carries the best point reached so callers can
/// inspect or restart from it.
class EstimationError : public std::runtime_error {
 public:
  EstimationError(const std::string& what, Eigen::VectorXd best_point,
                  double best_value)
      : std::runtime_error(what),
        best_point_(std::move(best_point)),
        best_value_(best_value) {}

  const Eigen::VectorXd& best_point() const noexcept { return best_point_; }
  double best_value() const noexcept { return best_value_; }

 private:
  Eigen::VectorXd best_point_;
  double best_value_;
};

/// Every candidate model failed, so nothing can be selected.
class SelectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gmmcv
