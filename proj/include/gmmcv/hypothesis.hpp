#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gmmcv/selection.hpp"

namespace gmmcv {

/// How the CV score difference is scaled. `Sigma` studentizes by σ̂ and has
/// a unit-variance null; `SigmaSquared` divides by σ̂² as in the original
/// display and is kept for comparison.
enum class RcvNormalization { Sigma, SigmaSquared };
enum class VarianceMode { GeneralSplit, IndependentSplits };
enum class Direction { None, ModelOneBetter, ModelTwoBetter };

std::string to_string(RcvNormalization n);
std::string to_string(VarianceMode m);
std::string to_string(Direction d);
RcvNormalization parse_normalization(const std::string& s);
VarianceMode parse_variance_mode(const std::string& s);

/// Validation-set moments of one split, stacked over models.
struct SplitMoments {
  /// Row ids of the validation observations (shared across splits).
  std::vector<Index> rows;
  /// n × m raw moments evaluated at the split's trained parameters.
  Eigen::MatrixXd draws;
  /// Contrast vector R_S contracting the centered moments (length m).
  Eigen::VectorXd contrast;
};

struct MomentDraws {
  std::vector<SplitMoments> splits;
};

struct VarianceEstimate {
  VarianceMode mode = VarianceMode::IndependentSplits;
  double sigma_sq = 0.0;
  /// σ̂² is zero up to rounding: the moments carry no variation.
  bool degenerate = false;
  /// The general covariance needed eigenvalue clipping.
  bool psd_repaired = false;
  /// Per-split blocks C(S,S) (independent) or the full V_* (general, one entry).
  std::vector<Eigen::MatrixXd> components;
};

/// Moments of the first two models of a CV report on every validation set,
/// with R_S = contrast_i · 2 W_S μ̂_S / C(r,k). Requires identity W_S.
MomentDraws collect_moment_draws(const std::vector<MomentModel>& models, const Dataset& data,
                                 const CvReport& report,
                                 const std::vector<double>& contrast = {1.0, -1.0});

VarianceEstimate estimate_variance_independent(const MomentDraws& draws, const SplitPlan& plan);
VarianceEstimate estimate_variance_general(const MomentDraws& draws, const SplitPlan& plan);

struct TestResult {
  double r_cv = 0.0;
  double sigma_hat_sq = 0.0;
  /// Validation-set size used in the √n scaling (mean over splits).
  double n_valid = 0.0;
  double p_value_two_sided = 1.0;
  /// One-sided p-value toward `direction`.
  double p_value_one_sided = 0.5;
  Direction direction = Direction::None;
  RcvNormalization normalization = RcvNormalization::Sigma;
  double q_valid_1 = 0.0;
  double q_valid_2 = 0.0;
};

TestResult compute_rcv(const CvReport& report, const VarianceEstimate& variance,
                       const SplitPlan& plan,
                       RcvNormalization normalization = RcvNormalization::Sigma);

struct RcvTestOptions {
  int r = 2;
  int k = 1;
  VarianceMode variance = VarianceMode::GeneralSplit;
  RcvNormalization normalization = RcvNormalization::Sigma;
};

/// CV with identity weighting on two models, then the R_CV test.
TestResult rcv_test(const std::vector<MomentModel>& models, const Dataset& data,
                     const OptimizerConfig& opt, const RcvTestOptions& options = {});

}  // namespace gmmcv
