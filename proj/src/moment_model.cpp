#include "gmmcv/moment_model.hpp"

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "gmmcv/errors.hpp"

namespace gmmcv {

bool ParamBox::bounded() const noexcept {
  return lower.size() == upper.size() && lower.allFinite() && upper.allFinite();
}

bool ParamBox::contains(const Eigen::VectorXd& x) const noexcept {
  if (x.size() != lower.size()) return false;
  return ((x.array() >= lower.array()) && (x.array() <= upper.array())).all();
}

Eigen::VectorXd ParamBox::center() const { return 0.5 * (lower + upper); }

Eigen::VectorXd ParamBox::project(const Eigen::VectorXd& x) const {
  return x.cwiseMax(lower).cwiseMin(upper);
}

ParamBox ParamBox::uniform(Index p, double lo, double hi) {
  return ParamBox{Eigen::VectorXd::Constant(p, lo), Eigen::VectorXd::Constant(p, hi)};
}

void validate_model(const MomentModel& model) {
  const std::string who = model.name.empty() ? "model" : "model '" + model.name + "'";
  if (model.p < 1 || model.q < 1)
    throw ConfigurationError(who + ": p and q must be positive");
  if (model.q < model.p && !model.under_identified)
    throw ConfigurationError(who + ": q < p requires the under_identified flag");
  if (model.box.lower.size() != model.p || model.box.upper.size() != model.p)
    throw ConfigurationError(who + ": parameter box dimension differs from p");
  if (((model.box.upper - model.box.lower).array() < 0).any())
    throw ConfigurationError(who + ": parameter box has upper < lower");
  if (!model.moment) throw ConfigurationError(who + ": missing moment function");
  if (!model.affine.empty() && static_cast<Index>(model.affine.size()) != model.p)
    throw ConfigurationError(who + ": affine flags must be empty or have length p");
  const auto& ins = model.instruments;
  if (ins.available() && ins.equations * ins.cols != model.q)
    throw ConfigurationError(who + ": q must equal equations x instrument columns");
}

std::string weighting_name(const WeightingSpec& spec) {
  switch (spec.index()) {
    case 0: return "identity";
    case 1: return "inverse_instrument_gram";
    default: return "fixed";
  }
}

void check_weight_matrix(const Eigen::MatrixXd& w, Index q) {
  if (w.rows() != q || w.cols() != q)
    throw ConfigurationError("weighting matrix is " + std::to_string(w.rows()) + "x" +
                             std::to_string(w.cols()) + " but the model has q=" +
                             std::to_string(q));
  if (!w.allFinite()) throw ConfigurationError("weighting matrix has non-finite entries");
  const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
  if ((w - w.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw ConfigurationError("weighting matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(w, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-10 * scale)
    throw ConfigurationError("weighting matrix is not positive semidefinite");
}

ResolvedWeighting resolve_weighting(const WeightingSpec& spec, Index q,
                                    const InstrumentSpec& instruments,
                                    const Dataset& data) {
  if (std::holds_alternative<weighting::Identity>(spec))
    return {Eigen::MatrixXd::Identity(q, q), false};

  if (const auto* fixed = std::get_if<weighting::Fixed>(&spec)) {
    check_weight_matrix(fixed->matrix, q);
    return {0.5 * (fixed->matrix + fixed->matrix.transpose()), false};
  }

  const auto& gram = std::get<weighting::InverseInstrumentGram>(spec);
  if (!instruments.available())
    throw ConfigurationError("inverse instrument gram weighting needs an instrument extractor");
  if (instruments.equations * instruments.cols != q)
    throw ConfigurationError("instrument layout does not match q");

  const Index c = instruments.cols;
  Eigen::MatrixXd zz = Eigen::MatrixXd::Zero(c, c);
  Eigen::MatrixXd z(instruments.rows, c);
  for (Index t = 0; t < data.size(); ++t) {
    instruments.fn(data.row(t), z);
    zz.noalias() += z.transpose() * z;
  }
  zz /= static_cast<double>(data.size() * instruments.rows);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(zz);
  const double top = eig.eigenvalues().maxCoeff();
  const double bottom = eig.eigenvalues().minCoeff();
  bool ridged = false;
  if (!(top > 0) || bottom <= 1e-12 * top) {
    if (!gram.allow_ridge)
      throw SingularWeightError(
          "instrument gram matrix Z'Z is singular; enable the ridge fallback or "
          "drop collinear instruments");
    zz.diagonal().array() += 1e-10 * std::max(zz.trace() / static_cast<double>(c), 1e-300);
    ridged = true;
  }
  Eigen::MatrixXd inv = zz.ldlt().solve(Eigen::MatrixXd::Identity(c, c));
  inv = 0.5 * (inv + inv.transpose());

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(q, q);
  for (Index e = 0; e < instruments.equations; ++e) w.block(e * c, e * c, c, c) = inv;
  return {std::move(w), ridged};
}

Eigen::MatrixXd weight_root(const Eigen::MatrixXd& w) {
  if (w.isIdentity(0.0)) return w;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(w);
  const Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0);
  const double tol = 1e-14 * std::max(vals.maxCoeff(), 0.0);
  Index rank = 0;
  for (Index i = 0; i < vals.size(); ++i) rank += vals(i) > tol;
  Eigen::MatrixXd root(rank, w.rows());
  Index row = 0;
  for (Index i = 0; i < vals.size(); ++i) {
    if (vals(i) > tol)
      root.row(row++) = std::sqrt(vals(i)) * eig.eigenvectors().col(i).transpose();
  }
  return root;
}

}  // namespace gmmcv
