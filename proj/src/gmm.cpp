#include "gmmcv/gmm.hpp"

#include <algorithm>
#include <string>

#include "gmmcv/errors.hpp"

namespace gmmcv {

namespace {

void check_theta(const MomentModel& model, const Eigen::VectorXd& theta) {
  if (theta.size() != model.p)
    throw ConfigurationError("theta has dimension " + std::to_string(theta.size()) +
                             " but model expects " + std::to_string(model.p));
  if (!model.box.contains(theta))
    throw ConfigurationError("theta lies outside the parameter box");
}

}  // namespace

Eigen::VectorXd mean_moment(const MomentModel& model, const Dataset& data,
                            const Eigen::VectorXd& theta) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.q);
  Eigen::VectorXd f(model.q);
  for (Index t = 0; t < data.size(); ++t) {
    model.moment(data.row(t), theta, f);
    sum += f;
  }
  return sum / static_cast<double>(data.size());
}

Eigen::MatrixXd moment_matrix(const MomentModel& model, const Dataset& data,
                              const Eigen::VectorXd& theta) {
  Eigen::MatrixXd out(data.size(), model.q);
  Eigen::VectorXd f(model.q);
  for (Index t = 0; t < data.size(); ++t) {
    model.moment(data.row(t), theta, f);
    out.row(t) = f.transpose();
  }
  return out;
}

Eigen::MatrixXd mean_moment_jacobian(const MomentModel& model, const Dataset& data,
                                     const Eigen::VectorXd& theta) {
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(model.q, model.p);
  if (model.jacobian) {
    Eigen::MatrixXd j(model.q, model.p);
    for (Index t = 0; t < data.size(); ++t) {
      model.jacobian(data.row(t), theta, j);
      sum += j;
    }
    return sum / static_cast<double>(data.size());
  }
  Eigen::VectorXd x = theta;
  for (Index i = 0; i < model.p; ++i) {
    const double h = 6.0554544523933395e-06 * std::max(1.0, std::abs(theta(i)));
    const double hi = std::min(theta(i) + h, model.box.upper(i));
    const double lo = std::max(theta(i) - h, model.box.lower(i));
    if (hi == lo) continue;
    x(i) = hi;
    const Eigen::VectorXd gp = mean_moment(model, data, x);
    x(i) = lo;
    const Eigen::VectorXd gm = mean_moment(model, data, x);
    x(i) = theta(i);
    sum.col(i) = (gp - gm) / (hi - lo);
  }
  return sum;
}

double quadratic_form(const Eigen::VectorXd& g, const Eigen::MatrixXd& w) {
  return std::max(0.0, g.dot(w * g));
}

double evaluate_objective(const MomentModel& model, const Dataset& data,
                          const Eigen::VectorXd& theta, const Eigen::MatrixXd& w) {
  check_weight_matrix(w, model.q);
  check_theta(model, theta);
  const Eigen::VectorXd g = mean_moment(model, data, theta);
  if (g.size() != w.rows())
    throw ConfigurationError("moment function output does not match the weighting matrix");
  return quadratic_form(g, w);
}

double evaluate_objective(const MomentModel& model, const Dataset& data,
                          const Eigen::VectorXd& theta, const WeightingSpec& w) {
  return evaluate_objective(model, data, theta, resolve_weighting(w, model, data).matrix);
}

GmmEstimate estimate(const MomentModel& model, const Dataset& data,
                     const ResolvedWeighting& w, const OptimizerConfig& opt) {
  validate_model(model);
  check_weight_matrix(w.matrix, model.q);
  if (!model.box.bounded()) throw ConfigurationError("estimate needs a bounded parameter box");

  const Eigen::MatrixXd root = weight_root(w.matrix);
  LeastSquaresProblem problem;
  problem.n_params = model.p;
  problem.box = model.box;
  problem.affine = model.affine;
  problem.residual = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& r) {
    r = root * mean_moment(model, data, theta);
  };
  if (model.jacobian) {
    problem.jacobian = [&](const Eigen::VectorXd& theta, Eigen::MatrixXd& jac) {
      jac = root * mean_moment_jacobian(model, data, theta);
    };
  }
  OptimizerResult res = minimize_least_squares(problem, opt);

  GmmEstimate out;
  out.theta = std::move(res.x);
  out.objective = quadratic_form(mean_moment(model, data, out.theta), w.matrix);
  out.weighting = w.matrix;
  out.ridged = w.ridged;
  out.trace = std::move(res.trace);
  return out;
}

GmmEstimate estimate(const MomentModel& model, const Dataset& data, const WeightingSpec& w,
                     const OptimizerConfig& opt) {
  return estimate(model, data, resolve_weighting(w, model, data), opt);
}

}  // namespace gmmcv
