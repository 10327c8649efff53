#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gmmcv/gmm.hpp"
#include "gmmcv/splits.hpp"

namespace gmmcv {

enum class Criterion { CV, GMM, GMM_AIC, GMM_BIC };

std::string to_string(Criterion c);
Criterion parse_criterion(const std::string& name);

/// Index of the smallest finite score among non-failed entries. Scores
/// within 1e-12·max(1,|min|) of the minimum tie, and the lowest index wins.
/// Returns -1 when every entry failed.
Index select_minimum(const std::vector<double>& scores, const std::vector<bool>& failed);

struct SubsetFit {
  Eigen::VectorXd theta;
  double train_score = 0.0;
  Eigen::MatrixXd weight;  // W_S, resolved on the training rows
  bool ridged = false;
};

SubsetFit train_on_subset(const MomentModel& model, const Dataset& data, const SplitPlan& plan,
                          std::size_t s, const WeightingSpec& w, const OptimizerConfig& opt);

/// Quadratic form of the mean moment over the complement of subset s, with
/// the training weight W_S.
double validate_on_complement(const MomentModel& model, const Eigen::VectorXd& theta,
                              const Dataset& data, const SplitPlan& plan, std::size_t s,
                              const Eigen::MatrixXd& w_s);

struct ModelCv {
  std::string name;
  std::vector<double> scores;             // Q_{S,valid} per subset
  std::vector<double> train_scores;
  std::vector<Eigen::VectorXd> thetas;    // θ_S per subset
  std::vector<Eigen::MatrixXd> weights;   // W_S per subset
  double mean = 0.0;
  bool failed = false;
  std::string failure;
};

struct CvReport {
  SplitPlan plan;
  std::vector<ModelCv> models;
  Index selected = -1;
  /// Original index of each row when the data were pre-shuffled.
  std::vector<Index> permutation;
};

struct CvOptions {
  int parallelism = 1;
  /// Shuffle rows before fold assignment (for exchangeable data).
  std::optional<std::uint64_t> shuffle_seed;
};

CvReport cross_validate(const std::vector<MomentModel>& models, const Dataset& data, int r,
                        int k, const WeightingSpec& w, const OptimizerConfig& opt,
                        const CvOptions& options = {});

struct CriterionResult {
  Criterion criterion = Criterion::CV;
  std::vector<double> scores;
  std::vector<bool> failed;
  Index selected = -1;
  /// Full-sample estimates (minimand-based criteria only).
  std::vector<Eigen::VectorXd> thetas;
  std::vector<double> minimands;
};

CriterionResult cv_criterion(const CvReport& report);

CriterionResult select_by_gmm_minimand(const std::vector<MomentModel>& models,
                                       const Dataset& data, const WeightingSpec& w,
                                       const OptimizerConfig& opt, int parallelism = 1);

double gmm_aic(double q, Index T, Index c, Index p);
double gmm_bic(double q, Index T, Index c, Index p);

/// GMM-AIC or GMM-BIC scores built from a minimand result.
CriterionResult information_criterion(const CriterionResult& minimand,
                                      const std::vector<MomentModel>& models, Index T,
                                      Criterion which);

}  // namespace gmmcv
