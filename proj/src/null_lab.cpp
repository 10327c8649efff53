#include "gmmcv/null_lab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gmmcv/errors.hpp"
#include "gmmcv/parallel.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

void validate_null_design(const NullDesign& d) {
  if (d.reps < 1) throw ConfigurationError("null.reps must be at least 1");
  if (d.T < 4) throw ConfigurationError("null.T must be at least 4");
  if (!(d.level > 0.0 && d.level < 1.0)) throw ConfigurationError("null.level must lie in (0,1)");
  (void)make_splits(d.T, d.r, d.k);
}

Dataset generate_null_data(const NullDesign& design, std::uint64_t rep_index) {
  RandomStream rng(derive_seed(design.seed, 0x4e554c4cull), rep_index);
  RowMatrix rows(design.T, 4);
  for (Index t = 0; t < design.T; ++t)
    for (Index j = 0; j < 4; ++j) rows(t, j) = rng.normal();
  return Dataset(std::move(rows));
}

std::vector<MomentModel> null_models(const NullDesign& design) {
  std::vector<MomentModel> out;
  const double gaps[2] = {design.gap1, design.gap2};
  for (int i = 0; i < 2; ++i) {
    MomentModel m;
    m.name = "model" + std::to_string(i + 1);
    m.p = 1;
    m.q = 2;
    m.instrument_count = 2;
    m.box = ParamBox::uniform(1, -10.0, 10.0);
    const Index col = 2 * i;
    const double gap = gaps[i];
    m.moment = [col, gap](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) {
      out(0) = v(col) - th(0);
      out(1) = v(col + 1) - th(0) - gap;
    };
    m.jacobian = [](const ObsRef&, const Eigen::VectorXd&, MatRef out) { out.setConstant(-1.0); };
    out.push_back(std::move(m));
  }
  return out;
}

NullStudyResult run_null_study(const NullDesign& design, const OptimizerConfig& opt,
                               int parallelism) {
  validate_null_design(design);
  const auto models = null_models(design);
  NullStudyResult out;
  out.statistics.assign(static_cast<std::size_t>(design.reps), std::numeric_limits<double>::quiet_NaN());
  out.p_values = out.statistics;
  parallel_for(static_cast<std::size_t>(design.reps), parallelism, [&](std::size_t rep) {
    try {
      const Dataset data = generate_null_data(design, rep);
      const TestResult res = rcv_test(models, data, opt,
                                      RcvTestOptions{design.r, design.k, design.variance,
                                                     design.normalization});
      out.statistics[rep] = res.r_cv;
      out.p_values[rep] = res.p_value_two_sided;
    } catch (const std::exception&) {
      // counted below
    }
  });
  int ok = 0, rejected = 0;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < out.statistics.size(); ++i) {
    if (!std::isfinite(out.statistics[i])) {
      ++out.failures;
      continue;
    }
    ++ok;
    rejected += out.p_values[i] < design.level;
    sum += out.statistics[i];
    sum_sq += out.statistics[i] * out.statistics[i];
  }
  if (ok > 0) {
    out.rejection_rate = static_cast<double>(rejected) / ok;
    out.mean = sum / ok;
    out.variance = ok > 1 ? (sum_sq - ok * out.mean * out.mean) / (ok - 1) : 0.0;
  }
  return out;
}

KsResult ks_test_normal(const std::vector<double>& sample) {
  std::vector<double> xs;
  for (double x : sample)
    if (std::isfinite(x)) xs.push_back(x);
  KsResult out;
  out.n = xs.size();
  if (xs.empty()) return out;
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-xs[i] / std::sqrt(2.0));
    out.statistic = std::max({out.statistic, (static_cast<double>(i) + 1.0) / n - cdf,
                              cdf - static_cast<double>(i) / n});
  }
  const double lambda = std::sqrt(n) * out.statistic;
  if (lambda < 0.2) return out;  // the series sums to 1 here
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += (j % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-18) break;
  }
  out.p_value = std::clamp(sum, 0.0, 1.0);
  return out;
}

std::vector<ConstrainedModel> null_constrained_models(const NullDesign& design) {
  std::vector<ConstrainedModel> out;
  const double gaps[2] = {design.gap1, design.gap2};
  for (int i = 0; i < 2; ++i) {
    ConstrainedModel m;
    m.name = "model" + std::to_string(i + 1);
    m.theta_dim = 1;
    m.eta_per_obs = 2;
    m.q = 2;
    m.instrument_count = 2;
    m.theta_box = ParamBox::uniform(1, -10.0, 10.0);
    const Index col = 2 * i;
    const double gap = gaps[i];
    m.moment = [gap](const ObsRef&, const Eigen::VectorXd& th, const Eigen::VectorXd&,
                     const ConstVecRef& eta, VecRef out) {
      out(0) = eta(0) - th(0);
      out(1) = eta(1) - th(0) - gap;
    };
    m.moment_jacobian = [](const ObsRef&, const Eigen::VectorXd&, const Eigen::VectorXd&,
                           const ConstVecRef&, MatRef out) {
      out << -1.0, 1.0, 0.0, -1.0, 0.0, 1.0;
    };
    m.obs_constraints = 2;
    m.obs_constraint = [col](const ObsRef& v, const Eigen::VectorXd&, const Eigen::VectorXd&,
                             const ConstVecRef& eta, VecRef out) {
      out(0) = eta(0) - v(col);
      out(1) = eta(1) - v(col + 1);
    };
    m.obs_constraint_jacobian = [](const ObsRef&, const Eigen::VectorXd&, const Eigen::VectorXd&,
                                   const ConstVecRef&, MatRef out) {
      out << 0.0, 1.0, 0.0, 0.0, 0.0, 1.0;
    };
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<ConsistencyRow> run_consistency_study(const NullDesign& base,
                                                  const std::vector<Index>& sizes,
                                                  const OptimizerConfig& opt, bool mpec,
                                                  int parallelism) {
  if (sizes.empty()) throw ConfigurationError("consistency study needs at least one T");
  std::vector<ConsistencyRow> out;
  for (Index T : sizes) {
    NullDesign design = base;
    design.T = T;
    validate_null_design(design);
    const auto models = null_models(design);
    const auto constrained = null_constrained_models(design);
    MpecOptions mopt;
    mopt.optimizer = opt;
    std::vector<int> pick(static_cast<std::size_t>(design.reps), -1);
    parallel_for(pick.size(), parallelism, [&](std::size_t rep) {
      try {
        const Dataset data = generate_null_data(design, rep);
        const CvReport report =
            mpec ? cross_validate_mpec(constrained, data, design.r, design.k, weighting::Identity{},
                                       mopt)
                 : cross_validate(models, data, design.r, design.k, weighting::Identity{}, opt);
        pick[rep] = report.selected == 0 ? 1 : 0;
      } catch (const std::exception&) {
        // left at -1
      }
    });
    ConsistencyRow row;
    row.T = T;
    row.reps = design.reps;
    int hits = 0;
    for (int v : pick) {
      if (v < 0) ++row.failures;
      else hits += v;
    }
    const int n = row.reps - row.failures;
    if (n > 0) {
      row.accuracy = static_cast<double>(hits) / n;
      row.stderr_ = std::sqrt(row.accuracy * (1.0 - row.accuracy) / n);
    }
    out.push_back(row);
  }
  return out;
}

}  // namespace gmmcv
