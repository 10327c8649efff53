#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gmmcv/moment_model.hpp"

namespace gmmcv {

struct OptimizerConfig {
  /// Start 0 is the box center; the rest are scrambled Sobol points.
  int starts = 8;
  /// Nelder-Mead with box projection before the polish.
  bool simplex = true;
  /// Levenberg-Marquardt on the weighted residual.
  bool polish = true;
  int max_evaluations = 10000;  // per start
  double param_tol = 1e-8;
  double objective_tol = 1e-12;
  std::uint64_t seed = 0;
};

void validate_optimizer_config(const OptimizerConfig& config);

struct OptimizerTrace {
  int starts_run = 0;
  int converged_starts = 0;
  int best_start = -1;
  long evaluations = 0;
  long iterations = 0;
  /// Final objective of every start, NaN when the start threw.
  std::vector<double> start_values;
  std::string message;
};

/// Minimize ||r(x)||^2 over a box.
struct LeastSquaresProblem {
  Index n_params = 0;
  ParamBox box;
  std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r)> residual;
  /// Optional analytic Jacobian of r.
  std::function<void(const Eigen::VectorXd& x, Eigen::MatrixXd& jac)> jacobian;
  /// Optional, empty or one flag per parameter. Flagged coordinates enter r
  /// affinely; each start first searches the remaining coordinates with the
  /// flagged ones solved by linear least squares, then polishes jointly.
  std::vector<bool> affine;
};

struct OptimizerResult {
  Eigen::VectorXd x;
  double value = 0.0;
  OptimizerTrace trace;
};

/// Best of the configured starts. Throws EstimationError, carrying the best
/// point seen, when no start converges.
OptimizerResult minimize_least_squares(const LeastSquaresProblem& problem,
                                       const OptimizerConfig& config);

/// The deterministic start points used by minimize_least_squares.
std::vector<Eigen::VectorXd> multistart_points(const ParamBox& box, int count,
                                               std::uint64_t seed);

}  // namespace gmmcv
