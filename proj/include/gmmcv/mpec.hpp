#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gmmcv/selection.hpp"

namespace gmmcv {

using ConstVecRef = Eigen::Ref<const Eigen::VectorXd>;

/// Per-observation callback of (v_t, θ, σ, η_t).
using ObsFn = std::function<void(const ObsRef& v, const Eigen::VectorXd& theta,
                                 const Eigen::VectorXd& sigma, const ConstVecRef& eta,
                                 VecRef out)>;
/// Derivative of an ObsFn with respect to [θ, σ, η_t], written into a
/// (rows × (p + s + e)) matrix.
using ObsJacobianFn = std::function<void(const ObsRef& v, const Eigen::VectorXd& theta,
                                         const Eigen::VectorXd& sigma, const ConstVecRef& eta,
                                         MatRef out)>;
/// Constraints coupling the whole sample: (data, θ, σ, η as n×e) → m₀.
using SharedConstraintFn =
    std::function<void(const Dataset& data, const Eigen::VectorXd& theta,
                       const Eigen::VectorXd& sigma, const Eigen::MatrixXd& eta, VecRef out)>;

/// GMM model whose unknowns are split into model parameters θ, shared
/// endogenous variables σ and observation-specific variables η_t, tied
/// together by equality constraints h = 0.
struct ConstrainedModel {
  std::string name;
  Index theta_dim = 0;
  Index sigma_dim = 0;
  Index eta_per_obs = 0;
  Index q = 0;
  /// |c| in the information criteria.
  Index instrument_count = 0;
  ParamBox theta_box;
  /// Empty means σ is unbounded.
  ParamBox sigma_box;

  ObsFn moment;                  // q-vector
  ObsJacobianFn moment_jacobian;  // optional

  Index obs_constraints = 0;  // m per observation
  ObsFn obs_constraint;
  ObsJacobianFn obs_constraint_jacobian;  // optional

  Index shared_constraints = 0;  // m₀, differentiated numerically
  SharedConstraintFn shared_constraint;

  InstrumentSpec instruments;

  bool has_constraints() const noexcept { return obs_constraints > 0 || shared_constraints > 0; }
};

void validate_constrained_model(const ConstrainedModel& model);

struct MpecOptions {
  double initial_penalty = 1.0;
  double penalty_growth = 10.0;
  int max_outer = 20;
  int max_inner = 500;
  double feasibility_tol = 1e-8;
  double kkt_tol = 1e-6;
  /// Used when the model reduces to a plain moment model.
  OptimizerConfig optimizer;
};

void validate_mpec_options(const MpecOptions& options);

struct ConstrainedEstimate {
  Eigen::VectorXd theta;
  Eigen::VectorXd sigma;
  Eigen::MatrixXd eta;  // n × e
  double objective = 0.0;
  /// sup-norm of all constraint residuals.
  double feasibility = 0.0;
  /// sup-norm of the projected Lagrangian gradient.
  double kkt = 0.0;
  Eigen::MatrixXd weighting;
  int outer_iterations = 0;
  long inner_iterations = 0;
  double penalty = 0.0;
  std::string message;
};

/// argmin over (θ, σ, η) of ḡ'Wḡ subject to h = 0. Throws EstimationError
/// with the best iterate when feasibility or stationarity is not reached.
ConstrainedEstimate estimate_mpec(const ConstrainedModel& model, const Dataset& data,
                                  const ResolvedWeighting& w, const MpecOptions& options = {});
ConstrainedEstimate estimate_mpec(const ConstrainedModel& model, const Dataset& data,
                                  const WeightingSpec& w, const MpecOptions& options = {});

struct MpecValidation {
  /// +∞ when the constraints cannot be met at the frozen (θ, σ).
  double score = 0.0;
  bool feasible = true;
  double violation = 0.0;
  Eigen::MatrixXd eta;
  std::string diagnostic;
};

/// Minimized validation objective over η only, with (θ, σ) frozen.
MpecValidation validate_mpec(const ConstrainedModel& model, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& sigma, const Dataset& validation,
                             const Eigen::MatrixXd& w, const MpecOptions& options = {});

/// V(θ): the objective minimized over (σ, η) subject to h = 0 at fixed θ.
/// +∞ when infeasible.
double profile_mpec(const ConstrainedModel& model, const Dataset& data,
                    const Eigen::VectorXd& theta, const Eigen::MatrixXd& w,
                    const MpecOptions& options = {});

/// Cross-validation with constrained training and η-only validation.
/// `thetas` in the report hold [θ; σ]. A model with an infinite score on
/// any split is disqualified.
CvReport cross_validate_mpec(const std::vector<ConstrainedModel>& models, const Dataset& data,
                             int r, int k, const WeightingSpec& w,
                             const MpecOptions& options = {}, const CvOptions& cv = {});

// ---------------------------------------------------------------------------
// η-eliminable linear models, used by the equivalence checks.

/// Linear IV model written in MPEC form over rows [y, x(p), z(c)]:
/// moments z_t·η_t with η_t − (y_t − x_t'θ − σ) = 0. With `intercept` the
/// shared σ is a free intercept; otherwise σ is empty. `columns` selects
/// which x columns enter (all when empty).
ConstrainedModel eliminable_linear_model(std::string name, Index p, Index c, bool intercept,
                                         std::vector<Index> columns = {}, double box = 50.0);

/// The same model with η substituted out: moments z_t·(y_t − x_t'θ − σ),
/// parameters [θ; σ].
MomentModel eliminated_linear_model(std::string name, Index p, Index c, bool intercept,
                                    std::vector<Index> columns = {}, double box = 50.0);

/// Random linear IV rows [y, x(p), z(c)] with an endogenous regressor shock:
/// z ~ N(0,1), x = zΠ + u/2 + ν, y = xβ + u. Deterministic per (seed, stream).
Dataset random_linear_iv_data(Index T, Index p, Index c, std::uint64_t seed,
                              std::uint64_t stream);

/// Equivalence check between the MPEC and eliminated paths on random
/// instances. Instance i has p = 2 + i mod max_p regressors and
/// c = p + i mod (max_extra + 1) instruments; candidates use the first
/// regressor only or all of them.
struct MpecCheckDesign {
  int instances = 50;
  Index T = 200;
  int r = 2;
  int k = 1;
  int max_p = 3;
  int max_extra = 3;
  std::uint64_t seed = 1;
  MpecOptions options;
};

void validate_mpec_check(const MpecCheckDesign& d);

struct MpecCheckRow {
  int instance = 0;
  Index p = 0;
  Index c = 0;
  /// sup-norm gap of the full-sample estimates of the larger model.
  double theta_gap = 0.0;
  /// Largest |V_MPEC(θ) − V_GMM(θ)| over 10 θ values.
  double profile_gap = 0.0;
  /// Largest gap between per-split CV scores.
  double score_gap = 0.0;
  Index selected_mpec = -1;
  Index selected_gmm = -1;
  std::string error;
};

std::vector<MpecCheckRow> run_mpec_check(const MpecCheckDesign& design,
                                         const OptimizerConfig& opt, int parallelism = 1);

}  // namespace gmmcv
