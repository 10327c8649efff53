#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gmmcv/selection.hpp"

namespace gmmcv {

/// Set partition of firms {0..J-1} into price-colluding groups. Canonical
/// form: each group sorted, groups ordered by their smallest member.
class Partition {
 public:
  Partition() = default;
  /// Validates (disjoint, nonempty, covering) and canonicalizes.
  Partition(std::vector<std::vector<int>> groups, int J);

  /// Parses the 1-based notation used in outputs, e.g. "{1,2}{3}".
  static Partition parse(const std::string& text, int J);

  int J() const noexcept { return J_; }
  const std::vector<std::vector<int>>& groups() const noexcept { return groups_; }
  int group_of(int firm) const { return group_of_.at(static_cast<std::size_t>(firm)); }
  /// 1-based label, e.g. "{1,2}{3}".
  std::string label() const;

  bool operator==(const Partition& other) const { return groups_ == other.groups_; }

 private:
  std::vector<std::vector<int>> groups_;
  std::vector<int> group_of_;
  int J_ = 0;
};

/// All set partitions of J firms: more groups first, then lexicographic on
/// the canonical group lists. For J=3: {1}{2}{3}, {1}{2,3}, {1,2}{3},
/// {1,3}{2}, {1,2,3}. Requires 1 ≤ J ≤ 8.
std::vector<Partition> enumerate_partitions(int J);

/// Logit shares with the outside option: exp(δ_j) / (1 + Σ exp(δ)).
Eigen::VectorXd logit_shares(const Eigen::VectorXd& delta);

/// Δ_jr = −∂D_r/∂p_j within a group, zero across groups.
Eigen::MatrixXd delta_matrix(const Partition& partition, const Eigen::VectorXd& shares,
                             double alpha, double market_size = 1.0);

/// Group markups Δ^{-1}D evaluated at the given shares.
Eigen::VectorXd group_markups(const Partition& partition, const Eigen::VectorXd& shares,
                              double alpha);

struct EquilibriumResult {
  Eigen::VectorXd prices;
  Eigen::VectorXd shares;
  /// sup-norm of D − Δ(p − mc).
  double foc_residual = 0.0;
  int iterations = 0;
  bool used_fallback = false;
};

/// Joint-profit Bertrand prices for the given conduct. `utility` holds the
/// price-free mean utilities Xβ + ξ; `mc` the marginal costs Yγ + λ.
EquilibriumResult solve_equilibrium_prices(const Partition& partition, double alpha,
                                           const Eigen::VectorXd& utility,
                                           const Eigen::VectorXd& mc,
                                           double market_size = 1.0);

struct ConductScenario {
  int J = 3;
  Index T = 100;
  double alpha = -0.1;
  Eigen::Vector2d beta{2.0, 1.0};
  Eigen::Vector3d gamma{3.0, 0.0, 1.0};
  double char_sd = 0.1;
  double shock_sd = 1.0;
  double market_size = 1.0;
  Partition true_partition;
  std::uint64_t seed = 1;
};

void validate_scenario(const ConductScenario& s);

struct Market {
  Eigen::MatrixXd X;  // J×2: constant, x
  Eigen::MatrixXd Y;  // J×3: constant, x, w
  Eigen::VectorXd prices;
  Eigen::VectorXd shares;
  Eigen::VectorXd xi;      // demand shocks
  Eigen::VectorXd lambda;  // cost shocks
  Eigen::VectorXd mc;
  double market_size = 1.0;
  double foc_residual = 0.0;
};

struct MarketPanel {
  int J = 0;
  std::vector<Market> markets;
};

/// Simulates T markets under the scenario's true partition. Deterministic
/// per (seed, T, rep_index). Throws EstimationError when an equilibrium
/// cannot be solved to the FOC tolerance.
MarketPanel simulate_panel(const ConductScenario& scenario, std::uint64_t rep_index);

/// Which characteristics feed the instruments.
enum class InstrumentSource { Demand, DemandAndCost };
std::string to_string(InstrumentSource s);
InstrumentSource parse_instrument_source(const std::string& s);

/// Non-constant, non-duplicate characteristic columns of [X | Y] that feed
/// the instrument blocks.
struct InstrumentLayout {
  std::vector<int> columns;
  int J = 0;
  Index width() const noexcept { return 1 + 4 * static_cast<Index>(columns.size()); }
};

InstrumentLayout plan_instruments(const MarketPanel& panel, InstrumentSource source);

/// Z rows of one market: [1, own chars, own chars², market means, means²].
Eigen::MatrixXd build_instruments(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const InstrumentLayout& layout);

/// One row per market: shares, prices, X, Y and Z for all J products.
Dataset conduct_dataset(const MarketPanel& panel, const InstrumentLayout& layout);

struct ConductBounds {
  double alpha_lower = -3.0;
  double alpha_upper = -0.01;
  /// Symmetric bound on β and γ.
  double linear = 1000.0;
};

/// GMM model for one candidate conduct over θ = (α, β₀, β₁, γ₀, γ₁, γ₂).
/// Moments per market are the product averages of (ξ·z, λ·z).
MomentModel conduct_moment_model(const Partition& candidate, const InstrumentLayout& layout,
                                 const ConductBounds& bounds = {});

/// Residuals (ξ, λ) of one market at θ under a candidate partition.
std::pair<Eigen::VectorXd, Eigen::VectorXd> conduct_residuals(const Partition& candidate,
                                                              const Market& market,
                                                              const Eigen::VectorXd& theta);

struct ConductStudyDesign {
  int J = 3;
  std::vector<Index> T{25, 50, 75, 100};
  std::vector<double> alpha{-0.1, -0.3};
  std::vector<Partition> truths;
  int reps = 100;
  std::uint64_t seed = 1;
  Eigen::Vector2d beta{2.0, 1.0};
  Eigen::Vector3d gamma{3.0, 0.0, 1.0};
  double char_sd = 0.1;
  double shock_sd = 1.0;
  double market_size = 1.0;
  int r = 2;
  int k = 1;
  InstrumentSource instruments = InstrumentSource::DemandAndCost;
  ConductBounds bounds;
};

void validate_conduct_design(const ConductStudyDesign& d);

struct ConductCell {
  double alpha = 0.0;
  Index T = 0;
  Partition truth;
  int reps = 0;
  int failures = 0;
  std::vector<double> score_mean;  // per candidate
  std::vector<double> score_sd;
  std::vector<double> cv_frequency;
  std::vector<double> gmm_frequency;
};

struct ConductStudyResult {
  std::vector<Partition> candidates;
  std::vector<ConductCell> cells;  // α-major, then T, then truth
};

/// Solver settings used by the conduct experiments.
OptimizerConfig conduct_default_optimizer();

struct ConductRepOutcome {
  bool ok = false;
  std::vector<double> cv_scores;
  Index cv_selected = -1;
  Index gmm_selected = -1;
};

ConductRepOutcome run_conduct_replication(const ConductScenario& scenario,
                                          const ConductStudyDesign& design,
                                          const OptimizerConfig& opt, std::uint64_t rep_index);

ConductStudyResult run_conduct_study(const ConductStudyDesign& design,
                                     const OptimizerConfig& opt, int parallelism = 1);

}  // namespace gmmcv
