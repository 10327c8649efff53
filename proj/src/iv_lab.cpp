#include "gmmcv/iv_lab.hpp"

#include <cmath>
#include <optional>

#include "gmmcv/errors.hpp"
#include "gmmcv/parallel.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

std::string to_string(DeltaScaling s) {
  return s == DeltaScaling::PerRegressor ? "per_regressor" : "none";
}

DeltaScaling parse_delta_scaling(const std::string& s) {
  if (s == "per_regressor") return DeltaScaling::PerRegressor;
  if (s == "none") return DeltaScaling::None;
  throw ConfigurationError("unknown delta scaling '" + s + "' (expected per_regressor or none)");
}

void validate_iv_design(const IvDesign& d) {
  if (d.p1 < 1 || d.p2 < 1) throw ConfigurationError("iv.p1 and iv.p2 must be positive");
  if (d.p1 > d.c1) throw ConfigurationError("iv.p1 must not exceed iv.c1");
  if (d.p2 > d.c2) throw ConfigurationError("iv.p2 must not exceed iv.c2");
  if (d.alpha < 0) throw ConfigurationError("iv.alpha must be nonnegative");
  if (d.reps < 1) throw ConfigurationError("iv.reps must be at least 1");
  if (d.noise_sd < 0) throw ConfigurationError("iv.noise_sd must be nonnegative");
  if (!(d.param_bound > 0)) throw ConfigurationError("iv.param_bound must be positive");
  (void)make_splits(d.T, d.r, d.k);
}

Dataset IvDataset::packed() const {
  const Index T = y.size();
  RowMatrix rows(T, 1 + X1.cols() + X2.cols() + Z1.cols() + Z2.cols());
  Index col = 0;
  rows.col(col++) = y;
  for (const Eigen::MatrixXd* m : {&X1, &X2, &Z1, &Z2}) {
    rows.middleCols(col, m->cols()) = *m;
    col += m->cols();
  }
  return Dataset(std::move(rows));
}

Eigen::MatrixXd iv_delta(const IvDesign& d, int c, int p) {
  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(c, p);
  delta.topRows(p).setConstant(d.delta_offdiag);
  delta.topRows(p).diagonal().setOnes();
  if (d.delta_scaling == DeltaScaling::PerRegressor) delta /= static_cast<double>(p);
  return delta;
}

IvDataset generate_iv_data(const IvDesign& d, std::uint64_t rep_index) {
  validate_iv_design(d);
  RandomStream rng(derive_seed(d.seed, 0x49560000ull + static_cast<std::uint64_t>(d.T)), rep_index);
  const Index T = d.T;
  IvDataset out;
  out.Z1.resize(T, d.c1);
  out.Z2.resize(T, d.c2);
  Eigen::MatrixXd xi1(T, d.p1), xi2(T, d.p2);
  Eigen::VectorXd eps(T);
  for (Index t = 0; t < T; ++t) {
    for (int j = 0; j < d.c1; ++j) out.Z1(t, j) = rng.normal();
    for (int j = 0; j < d.c2; ++j) out.Z2(t, j) = rng.normal();
    for (int j = 0; j < d.p1; ++j) xi1(t, j) = d.noise_sd * rng.normal();
    for (int j = 0; j < d.p2; ++j) xi2(t, j) = d.noise_sd * rng.normal();
    eps(t) = d.noise_sd * rng.normal();
  }
  out.X1 = out.Z1 * iv_delta(d, d.c1, d.p1) + xi1;
  out.X2 = out.Z2 * iv_delta(d, d.c2, d.p2) + xi2;
  out.y = out.X1.rowwise().sum() * d.beta1 + out.X2.rowwise().sum() * d.beta2 +
          out.Z2.rowwise().sum() * (d.alpha / d.c2) + eps;
  return out;
}

namespace {

MomentModel linear_iv_model(std::string name, Index x_col, Index p, Index z_col, Index c,
                            double box) {
  MomentModel m;
  m.name = std::move(name);
  m.p = p;
  m.q = c;
  m.instrument_count = c;
  m.box = ParamBox::uniform(p, -box, box);
  m.moment = [=](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) {
    out = (v(0) - v.segment(x_col, p).dot(th)) * v.segment(z_col, c);
  };
  m.jacobian = [=](const ObsRef& v, const Eigen::VectorXd&, MatRef out) {
    out.noalias() = -v.segment(z_col, c) * v.segment(x_col, p).transpose();
  };
  m.instruments.fn = [=](const ObsRef& v, MatRef out) { out = v.segment(z_col, c).transpose(); };
  m.instruments.cols = c;
  return m;
}

}  // namespace

IvCandidates build_candidates(const IvDataset& ds, double box) {
  const Index p1 = ds.X1.cols(), p2 = ds.X2.cols(), c1 = ds.Z1.cols(), c2 = ds.Z2.cols();
  const Index x1 = 1, x2 = x1 + p1, z1 = x2 + p2, z2 = z1 + c1;
  return IvCandidates{linear_iv_model("model1", x1, p1, z1, c1, box),
                      linear_iv_model("model2", x2, p2, z2, c2, box), ds.packed()};
}

OptimizerConfig iv_default_optimizer() {
  OptimizerConfig c;
  c.starts = 1;
  c.simplex = false;
  c.polish = true;
  return c;
}

IvRepOutcome run_iv_replication(const IvDesign& design, const std::vector<Criterion>& criteria,
                                const OptimizerConfig& opt, std::uint64_t rep_index) {
  IvRepOutcome out;
  out.chose_first.assign(criteria.size(), -1);
  const IvCandidates cand = build_candidates(generate_iv_data(design, rep_index), design.param_bound);
  const std::vector<MomentModel> models{cand.m1, cand.m2};

  std::optional<CriterionResult> minimand;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      Index selected = -1;
      if (criteria[i] == Criterion::CV) {
        const CvReport rep =
            cross_validate(models, cand.data, design.r, design.k, weighting::Identity{}, opt);
        for (const auto& m : rep.models) {
          if (m.failed) throw EstimationError(m.failure, Eigen::VectorXd(), 0.0);
          out.cv_scores.push_back(m.mean);
        }
        selected = rep.selected;
      } else {
        if (!minimand) {
          minimand = select_by_gmm_minimand(models, cand.data, weighting::Identity{}, opt);
          if (minimand->failed[0] || minimand->failed[1])
            throw EstimationError("full-sample estimation failed", Eigen::VectorXd(), 0.0);
          out.minimands = minimand->minimands;
        }
        selected = criteria[i] == Criterion::GMM
                       ? minimand->selected
                       : information_criterion(*minimand, models, design.T, criteria[i]).selected;
      }
      out.chose_first[i] = selected == 0 ? 1 : 0;
    } catch (const std::exception&) {
      out.chose_first[i] = -1;
    }
  }
  return out;
}

IvStudyResult run_iv_study(const IvDesign& design, const std::vector<Criterion>& criteria,
                           const OptimizerConfig& opt, int parallelism) {
  validate_iv_design(design);
  if (criteria.empty()) throw ConfigurationError("iv.criteria must not be empty");
  IvStudyResult out;
  out.outcomes.resize(static_cast<std::size_t>(design.reps));
  parallel_for(out.outcomes.size(), parallelism, [&](std::size_t rep) {
    out.outcomes[rep] = run_iv_replication(design, criteria, opt, rep);
  });
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    AccuracyRow row;
    row.criterion = criteria[c];
    row.T = design.T;
    row.p1 = design.p1;
    row.p2 = design.p2;
    row.alpha = design.alpha;
    row.reps = design.reps;
    int hits = 0;
    for (const auto& o : out.outcomes) {
      if (o.chose_first[c] < 0) {
        ++row.failures;
        continue;
      }
      hits += o.chose_first[c];
    }
    const int n = row.reps - row.failures;
    if (n > 0) {
      row.accuracy = static_cast<double>(hits) / n;
      row.stderr_ = std::sqrt(row.accuracy * (1.0 - row.accuracy) / n);
    }
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace gmmcv
