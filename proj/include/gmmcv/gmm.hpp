#pragma once

#include <Eigen/Dense>

#include "gmmcv/dataset.hpp"
#include "gmmcv/moment_model.hpp"
#include "gmmcv/optimizer.hpp"

namespace gmmcv {

struct GmmEstimate {
  Eigen::VectorXd theta;
  double objective = 0.0;
  Eigen::MatrixXd weighting;
  /// The instrument gram needed the ridge fallback.
  bool ridged = false;
  OptimizerTrace trace;
};

/// ḡ(θ) = (1/T) Σ_t f(v_t, θ).
Eigen::VectorXd mean_moment(const MomentModel& model, const Dataset& data,
                            const Eigen::VectorXd& theta);

/// ∂ḡ/∂θ (q×p): analytic when the model supplies a Jacobian, otherwise
/// central differences.
Eigen::MatrixXd mean_moment_jacobian(const MomentModel& model, const Dataset& data,
                                     const Eigen::VectorXd& theta);

/// Per-observation moments stacked as a T×q matrix.
Eigen::MatrixXd moment_matrix(const MomentModel& model, const Dataset& data,
                              const Eigen::VectorXd& theta);

/// g' W g, clamped at zero against rounding.
double quadratic_form(const Eigen::VectorXd& g, const Eigen::MatrixXd& w);

double evaluate_objective(const MomentModel& model, const Dataset& data,
                          const Eigen::VectorXd& theta, const Eigen::MatrixXd& w);
double evaluate_objective(const MomentModel& model, const Dataset& data,
                          const Eigen::VectorXd& theta, const WeightingSpec& w);

GmmEstimate estimate(const MomentModel& model, const Dataset& data,
                     const ResolvedWeighting& w, const OptimizerConfig& opt);
GmmEstimate estimate(const MomentModel& model, const Dataset& data,
                     const WeightingSpec& w, const OptimizerConfig& opt);

}  // namespace gmmcv
