#pragma once

#include <cstdint>
#include <vector>

#include "gmmcv/hypothesis.hpp"
#include "gmmcv/mpec.hpp"

namespace gmmcv {

/// Two-model design for the R_CV null. Observation v = (u1, w1, u2, w2),
/// all independent N(0,1). Model i has moments (u_i − θ, w_i − θ − d_i);
/// with d_i ≠ 0 it is globally misspecified with population minimand d_i²/2,
/// so d1 = d2 gives equal fit and d_i = 0 a correctly specified model.
struct NullDesign {
  Index T = 2000;
  int r = 2;
  int k = 1;
  double gap1 = 1.0;
  double gap2 = 1.0;
  int reps = 1000;
  std::uint64_t seed = 1;
  VarianceMode variance = VarianceMode::GeneralSplit;
  RcvNormalization normalization = RcvNormalization::Sigma;
  double level = 0.05;
};

void validate_null_design(const NullDesign& d);

Dataset generate_null_data(const NullDesign& design, std::uint64_t rep_index);
std::vector<MomentModel> null_models(const NullDesign& design);

struct NullStudyResult {
  std::vector<double> statistics;  // r_cv per replication (NaN on failure)
  std::vector<double> p_values;
  int failures = 0;
  double rejection_rate = 0.0;
  double mean = 0.0;
  double variance = 0.0;
};

NullStudyResult run_null_study(const NullDesign& design, const OptimizerConfig& opt,
                               int parallelism = 1);

/// One-sample Kolmogorov-Smirnov test against N(0,1) with the asymptotic
/// Kolmogorov distribution. Non-finite entries are skipped.
struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};
KsResult ks_test_normal(const std::vector<double>& sample);

/// The same pair with the observed columns routed through η: η_t equals the
/// model's two data columns by constraint, and the moments read η instead.
std::vector<ConstrainedModel> null_constrained_models(const NullDesign& design);

struct ConsistencyRow {
  Index T = 0;
  double accuracy = 0.0;  // share of replications where CV picked model 1
  double stderr_ = 0.0;
  int reps = 0;
  int failures = 0;
};

/// CV selection accuracy for model 1 at each sample size, identity weighting.
/// With gap1 = 0 and gap2 ≠ 0 this is the correct-vs-globally-misspecified
/// pair. `mpec` runs the constrained formulation through cross_validate_mpec.
std::vector<ConsistencyRow> run_consistency_study(const NullDesign& design,
                                                  const std::vector<Index>& sizes,
                                                  const OptimizerConfig& opt, bool mpec = false,
                                                  int parallelism = 1);

}  // namespace gmmcv
