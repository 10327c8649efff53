#include "gmmcv/hypothesis.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "gmmcv/errors.hpp"

namespace gmmcv {

std::string to_string(RcvNormalization n) {
  return n == RcvNormalization::Sigma ? "sigma" : "sigma_sq";
}
std::string to_string(VarianceMode m) {
  return m == VarianceMode::GeneralSplit ? "general" : "independent";
}
std::string to_string(Direction d) {
  switch (d) {
    case Direction::ModelOneBetter: return "model1";
    case Direction::ModelTwoBetter: return "model2";
    default: return "none";
  }
}
RcvNormalization parse_normalization(const std::string& s) {
  if (s == "sigma") return RcvNormalization::Sigma;
  if (s == "sigma_sq") return RcvNormalization::SigmaSquared;
  throw ConfigurationError("unknown normalization '" + s + "' (expected sigma or sigma_sq)");
}
VarianceMode parse_variance_mode(const std::string& s) {
  if (s == "general") return VarianceMode::GeneralSplit;
  if (s == "independent") return VarianceMode::IndependentSplits;
  throw ConfigurationError("unknown variance mode '" + s + "' (expected general or independent)");
}

namespace {

Eigen::MatrixXd centered(const Eigen::MatrixXd& draws) {
  return draws.rowwise() - draws.colwise().mean();
}

void check_draws(const MomentDraws& draws, const SplitPlan& plan) {
  if (draws.splits.empty()) throw ConfigurationError("no split moments supplied");
  if (draws.splits.size() != plan.subset_count())
    throw ConfigurationError("moment draws do not match the split plan");
  const Index m = draws.splits.front().draws.cols();
  for (const auto& s : draws.splits) {
    if (s.draws.rows() < 2)
      throw ConfigurationError("variance estimation needs at least 2 validation observations per split");
    if (s.draws.cols() != m || s.contrast.size() != m)
      throw ConfigurationError("inconsistent moment dimensions across splits");
    if (static_cast<Index>(s.rows.size()) != s.draws.rows())
      throw ConfigurationError("row ids do not match the moment draws");
  }
}

// Zero up to rounding relative to the contrast and moment magnitudes.
bool is_degenerate(double sigma_sq, const MomentDraws& draws) {
  double scale = 0.0;
  for (const auto& s : draws.splits)
    scale = std::max(scale, s.contrast.squaredNorm() * s.draws.cwiseAbs2().maxCoeff());
  return !(sigma_sq > 1e-24 * scale) || sigma_sq <= 0.0;
}

}  // namespace

MomentDraws collect_moment_draws(const std::vector<MomentModel>& models, const Dataset& data,
                                 const CvReport& report, const std::vector<double>& contrast) {
  if (models.size() != report.models.size() || models.size() != contrast.size())
    throw ConfigurationError("models, report and contrast must have the same length");
  for (const auto& m : report.models)
    if (m.failed) throw ConfigurationError("model '" + m.name + "' failed during cross-validation");
  const auto& plan = report.plan;
  const double n_sub = static_cast<double>(plan.subset_count());
  Index width = 0;
  for (const auto& m : models) width += m.q;

  MomentDraws out;
  for (std::size_t s = 0; s < plan.subset_count(); ++s) {
    SplitMoments sm;
    sm.rows = plan.validation_rows(s);
    // Row ids refer to the fold order; map back when the report was shuffled.
    std::vector<Index> source = sm.rows;
    if (!report.permutation.empty())
      for (auto& t : source) t = report.permutation[static_cast<std::size_t>(t)];
    const Dataset valid = data.subset(source);
    sm.draws.resize(valid.size(), width);
    sm.contrast.resize(width);
    Index col = 0;
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto& w = report.models[i].weights[s];
      if (!w.isIdentity(1e-12))
        throw ConfigurationError("the R_CV test requires identity weighting");
      const Eigen::MatrixXd f = moment_matrix(models[i], valid, report.models[i].thetas[s]);
      sm.draws.middleCols(col, models[i].q) = f;
      sm.contrast.segment(col, models[i].q) =
          contrast[i] * 2.0 * (w * f.colwise().mean().transpose()) / n_sub;
      col += models[i].q;
    }
    out.splits.push_back(std::move(sm));
  }
  return out;
}

VarianceEstimate estimate_variance_independent(const MomentDraws& draws, const SplitPlan& plan) {
  check_draws(draws, plan);
  VarianceEstimate out;
  out.mode = VarianceMode::IndependentSplits;
  for (const auto& s : draws.splits) {
    const Eigen::MatrixXd xi = centered(s.draws);
    Eigen::MatrixXd block = xi.transpose() * xi / static_cast<double>(xi.rows());
    out.sigma_sq += s.contrast.dot(block * s.contrast);
    out.components.push_back(std::move(block));
  }
  out.degenerate = is_degenerate(out.sigma_sq, draws);
  return out;
}

VarianceEstimate estimate_variance_general(const MomentDraws& draws, const SplitPlan& plan) {
  check_draws(draws, plan);
  const std::size_t n_sub = draws.splits.size();
  const Index m = draws.splits.front().draws.cols();

  std::vector<Eigen::MatrixXd> xi(n_sub);
  std::vector<std::vector<std::pair<Index, Index>>> order(n_sub);
  for (std::size_t s = 0; s < n_sub; ++s) {
    xi[s] = centered(draws.splits[s].draws);
    for (std::size_t i = 0; i < draws.splits[s].rows.size(); ++i)
      order[s].emplace_back(draws.splits[s].rows[i], static_cast<Index>(i));
    std::sort(order[s].begin(), order[s].end());
  }

  const Index dim = m * static_cast<Index>(n_sub);
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd r(dim);
  for (std::size_t a = 0; a < n_sub; ++a) {
    r.segment(static_cast<Index>(a) * m, m) = draws.splits[a].contrast;
    for (std::size_t b = a; b < n_sub; ++b) {
      Eigen::MatrixXd block = Eigen::MatrixXd::Zero(m, m);
      auto ia = order[a].begin();
      auto ib = order[b].begin();
      while (ia != order[a].end() && ib != order[b].end()) {
        if (ia->first < ib->first) {
          ++ia;
        } else if (ib->first < ia->first) {
          ++ib;
        } else {
          block.noalias() += xi[a].row(ia->second).transpose() * xi[b].row(ib->second);
          ++ia;
          ++ib;
        }
      }
      block /= std::sqrt(static_cast<double>(xi[a].rows()) * static_cast<double>(xi[b].rows()));
      v.block(static_cast<Index>(a) * m, static_cast<Index>(b) * m, m, m) = block;
      if (b != a) v.block(static_cast<Index>(b) * m, static_cast<Index>(a) * m, m, m) = block.transpose();
    }
  }
  v = 0.5 * (v + v.transpose());

  VarianceEstimate out;
  out.mode = VarianceMode::GeneralSplit;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(v);
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  if (eig.eigenvalues().minCoeff() < -1e-10 * top) {
    const Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(0.0);
    v = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
    out.psd_repaired = true;
  }
  out.sigma_sq = r.dot(v * r);
  out.components.push_back(std::move(v));
  out.degenerate = is_degenerate(out.sigma_sq, draws);
  return out;
}

TestResult compute_rcv(const CvReport& report, const VarianceEstimate& variance,
                       const SplitPlan& plan, RcvNormalization normalization) {
  if (report.models.size() != 2) throw ConfigurationError("R_CV compares exactly two models");
  for (const auto& m : report.models)
    if (m.failed) throw ConfigurationError("model '" + m.name + "' failed on a training subset");
  if (!(variance.sigma_sq > 0.0) || variance.degenerate)
    throw EstimationError("variance estimate is zero or negative (degenerate moments)",
                          Eigen::VectorXd(), variance.sigma_sq);

  double n = 0.0;
  for (std::size_t s = 0; s < plan.subset_count(); ++s)
    n += static_cast<double>(plan.validation_rows(s).size());
  n /= static_cast<double>(plan.subset_count());

  TestResult out;
  out.normalization = normalization;
  out.q_valid_1 = report.models[0].mean;
  out.q_valid_2 = report.models[1].mean;
  out.sigma_hat_sq = variance.sigma_sq;
  out.n_valid = n;
  const double diff = out.q_valid_1 - out.q_valid_2;
  const double denom = normalization == RcvNormalization::Sigma ? std::sqrt(variance.sigma_sq)
                                                                 : variance.sigma_sq;
  out.r_cv = std::sqrt(n) * diff / denom;
  out.p_value_two_sided = std::erfc(std::abs(out.r_cv) / std::sqrt(2.0));
  out.p_value_one_sided = 0.5 * out.p_value_two_sided;
  out.direction = diff < 0 ? Direction::ModelOneBetter
                           : (diff > 0 ? Direction::ModelTwoBetter : Direction::None);
  if (out.direction == Direction::None) out.p_value_one_sided = 0.5;
  return out;
}

TestResult rcv_test(const std::vector<MomentModel>& models, const Dataset& data,
                    const OptimizerConfig& opt, const RcvTestOptions& options) {
  if (models.size() != 2) throw ConfigurationError("R_CV compares exactly two models");
  const CvReport report =
      cross_validate(models, data, options.r, options.k, weighting::Identity{}, opt);
  const MomentDraws draws = collect_moment_draws(models, data, report);
  const VarianceEstimate var = options.variance == VarianceMode::GeneralSplit
                                   ? estimate_variance_general(draws, report.plan)
                                   : estimate_variance_independent(draws, report.plan);
  return compute_rcv(report, var, report.plan, options.normalization);
}

}  // namespace gmmcv
