#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "gmmcv/selection.hpp"

namespace gmmcv {

/// How the first-stage coefficient matrices δ¹, δ² are scaled.
/// `PerRegressor` divides δ^i by p_i (matching the α/c₂ scaling of the
/// misspecification term), `None` uses the raw 1 / off-diagonal pattern.
enum class DeltaScaling { PerRegressor, None };

std::string to_string(DeltaScaling s);
DeltaScaling parse_delta_scaling(const std::string& s);

/// Linear IV design:
///   y  = X₁β¹ + X₂β² + Z₂·1·α/c₂ + ε,  X_i = Z_iδ^i + ξ^i.
/// Z entries and ξ, ε are i.i.d. normal; δ^i has 1 on the leading diagonal
/// and `delta_offdiag` elsewhere in its first p_i rows, zero below.
struct IvDesign {
  Index T = 100;
  int p1 = 3;
  int p2 = 9;
  int c1 = 10;
  int c2 = 10;
  double alpha = 12.0;
  int r = 2;
  int k = 1;
  int reps = 500;
  std::uint64_t seed = 1;
  double delta_offdiag = 0.5;
  DeltaScaling delta_scaling = DeltaScaling::PerRegressor;
  /// Common value of every entry of β¹ and of β².
  double beta1 = 1.0;
  double beta2 = 1.0;
  /// Scale of ξ¹, ξ² and ε.
  double noise_sd = 1.0;
  /// Symmetric box bound on every coefficient of both candidates.
  double param_bound = 100.0;
};

void validate_iv_design(const IvDesign& d);

struct IvDataset {
  Eigen::VectorXd y;
  Eigen::MatrixXd X1, X2, Z1, Z2;

  /// Rows packed as [y, X₁, X₂, Z₁, Z₂].
  Dataset packed() const;
};

/// First-stage coefficient matrix (c × p) of the design.
Eigen::MatrixXd iv_delta(const IvDesign& d, int c, int p);

IvDataset generate_iv_data(const IvDesign& design, std::uint64_t rep_index);

struct IvCandidates {
  MomentModel m1;  // y = X₁β + ε¹, E[Z₁'ε¹] = 0
  MomentModel m2;  // y = X₂β + ε², E[Z₂'ε²] = 0
  Dataset data;
};

IvCandidates build_candidates(const IvDataset& dataset, double box = 100.0);

/// Outcome of one replication. `chose_first[c]` is 1 when criterion c picked
/// model 1, 0 when it picked model 2, and -1 when the replication failed.
struct IvRepOutcome {
  std::vector<int> chose_first;
  std::vector<double> minimands;  // full-sample Q of each model, when computed
  std::vector<double> cv_scores;
};

IvRepOutcome run_iv_replication(const IvDesign& design, const std::vector<Criterion>& criteria,
                                const OptimizerConfig& opt, std::uint64_t rep_index);

struct AccuracyRow {
  Criterion criterion = Criterion::CV;
  Index T = 0;
  int p1 = 0;
  int p2 = 0;
  double alpha = 0.0;
  double accuracy = 0.0;
  double stderr_ = 0.0;
  int reps = 0;
  int failures = 0;
};

struct IvStudyResult {
  std::vector<AccuracyRow> rows;
  std::vector<IvRepOutcome> outcomes;
};

/// Solver settings used by the IV experiments: the moments are linear, so a
/// single Levenberg-Marquardt start with the analytic Jacobian suffices.
OptimizerConfig iv_default_optimizer();

IvStudyResult run_iv_study(const IvDesign& design, const std::vector<Criterion>& criteria,
                           const OptimizerConfig& opt, int parallelism = 1);

}  // namespace gmmcv
