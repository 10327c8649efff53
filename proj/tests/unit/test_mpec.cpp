#include <doctest.h>

#include <cmath>

#include "gmmcv/errors.hpp"
#include "gmmcv/mpec.hpp"
#include "gmmcv/null_lab.hpp"
#include "support/oracles.hpp"

using namespace gmmcv;

namespace {

OptimizerConfig linear_optimizer() {
  OptimizerConfig c;
  c.starts = 1;
  c.simplex = false;
  return c;
}

// random_iv_instance with the first instrument replaced by a constant and an
// intercept added to y, so a free intercept is identified.
oracle::IvInstance with_constant(oracle::IvInstance inst, double intercept) {
  inst.z.col(0).setOnes();
  inst.y.array() += intercept;
  RowMatrix rows(inst.y.size(), 1 + inst.x.cols() + inst.z.cols());
  rows.col(0) = inst.y;
  rows.middleCols(1, inst.x.cols()) = inst.x;
  rows.rightCols(inst.z.cols()) = inst.z;
  inst.data = Dataset(rows);
  return inst;
}

Eigen::MatrixXd gram_weight(const Eigen::MatrixXd& z) {
  const Eigen::MatrixXd zz = z.transpose() * z / static_cast<double>(z.rows());
  return zz.inverse();
}

Eigen::MatrixXd with_ones(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out << x, Eigen::VectorXd::Ones(x.rows());
  return out;
}

// min over the intercept s of |Z'(y − Xθ − s)/n|²_W, in closed form.
double profiled_intercept_objective(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                    const Eigen::VectorXd& y, const Eigen::VectorXd& theta,
                                    const Eigen::MatrixXd& w) {
  const double n = static_cast<double>(y.size());
  const Eigen::VectorXd a = z.transpose() * (y - x * theta) / n;
  const Eigen::VectorXd b = z.transpose() * Eigen::VectorXd::Ones(y.size()) / n;
  const double s = b.dot(w * a) / b.dot(w * b);
  const Eigen::VectorXd g = a - s * b;
  return g.dot(w * g);
}

}  // namespace

TEST_CASE("mpec model and option validation") {
  ConstrainedModel m = eliminable_linear_model("lin", 2, 3, false);
  CHECK_NOTHROW(validate_constrained_model(m));
  ConstrainedModel bad = m;
  bad.obs_constraint = nullptr;
  CHECK_THROWS_AS(validate_constrained_model(bad), ConfigurationError);
  bad = m;
  bad.theta_box = ParamBox::uniform(3, -1, 1);
  CHECK_THROWS_AS(validate_constrained_model(bad), ConfigurationError);
  bad = m;
  bad.sigma_box = ParamBox::uniform(2, -1, 1);
  CHECK_THROWS_AS(validate_constrained_model(bad), ConfigurationError);
  MpecOptions o;
  CHECK_NOTHROW(validate_mpec_options(o));
  o.penalty_growth = 1.0;
  CHECK_THROWS_AS(validate_mpec_options(o), ConfigurationError);
  o = {};
  o.max_outer = 0;
  CHECK_THROWS_AS(validate_mpec_options(o), ConfigurationError);
  CHECK_THROWS_AS(eliminable_linear_model("x", 2, 3, false, {2}), ConfigurationError);
}

TEST_CASE("eliminable linear model: MPEC estimate equals 2SLS") {
  for (int i = 0; i < 12; ++i) {
    const int p = 1 + i % 3, c = p + i % 4;
    const bool intercept = i % 2 == 1;
    auto inst = oracle::random_iv_instance(120, p, c + intercept, 500 + i);
    if (intercept) inst = with_constant(inst, 0.7);
    CAPTURE(i);
    const ConstrainedModel m = eliminable_linear_model("lin", p, c + intercept, intercept);
    const ConstrainedEstimate est =
        estimate_mpec(m, inst.data, weighting::InverseInstrumentGram{});
    const Eigen::VectorXd want =
        intercept ? oracle::tsls(with_ones(inst.x), inst.z, inst.y) : oracle::tsls(inst.x, inst.z, inst.y);
    CHECK((est.theta - want.head(p)).cwiseAbs().maxCoeff() < 1e-6);
    if (intercept) CHECK(std::abs(est.sigma(0) - want(p)) < 1e-6);
    CHECK(est.feasibility <= 1e-8);
    CHECK(est.kkt <= 1e-6);
    CHECK(est.eta.rows() == 120);
    CHECK(est.eta.cols() == 1);

    // The η solution is the residual at the estimate.
    const Eigen::VectorXd resid =
        inst.y - inst.x * est.theta - Eigen::VectorXd::Constant(120, intercept ? est.sigma(0) : 0.0);
    CHECK((est.eta.col(0) - resid).cwiseAbs().maxCoeff() < 1e-8);

    // Objective agrees with the dense formula at the estimate.
    const Eigen::MatrixXd xs = intercept ? with_ones(inst.x) : inst.x;
    Eigen::VectorXd params = est.theta;
    if (intercept) {
      params.conservativeResize(p + 1);
      params(p) = est.sigma(0);
    }
    CHECK(est.objective ==
          doctest::Approx(oracle::iv_objective(xs, inst.z, inst.y, params, gram_weight(inst.z)))
              .epsilon(1e-9));
  }
}

TEST_CASE("finite-difference Jacobians reach the same estimate") {
  const auto inst = oracle::random_iv_instance(80, 2, 4, 77);
  ConstrainedModel m = eliminable_linear_model("lin", 2, 4, false);
  m.moment_jacobian = nullptr;
  m.obs_constraint_jacobian = nullptr;
  const auto est = estimate_mpec(m, inst.data, weighting::InverseInstrumentGram{});
  CHECK((est.theta - oracle::tsls(inst.x, inst.z, inst.y)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("profiled objective V(theta) matches the eliminated form on a grid") {
  for (bool intercept : {false, true}) {
    auto inst = oracle::random_iv_instance(90, 2, 4, 41);
    if (intercept) inst = with_constant(inst, -0.4);
    const ConstrainedModel m = eliminable_linear_model("lin", 2, 4, intercept);
    const Eigen::MatrixXd w = gram_weight(inst.z);
    for (int g = 0; g < 10; ++g) {
      Eigen::VectorXd th(2);
      th << -1.0 + 0.25 * g, 0.5 - 0.1 * g;
      const double want = intercept ? profiled_intercept_objective(inst.x, inst.z, inst.y, th, w)
                                    : oracle::iv_objective(inst.x, inst.z, inst.y, th, w);
      CAPTURE(g);
      CHECK(std::abs(profile_mpec(m, inst.data, th, w) - want) < 1e-8);
    }
  }
}

TEST_CASE("validation over eta equals the eliminated validation score") {
  const auto inst = oracle::random_iv_instance(100, 3, 5, 9);
  const ConstrainedModel m = eliminable_linear_model("lin", 3, 5, false);
  const MomentModel plain = eliminated_linear_model("lin", 3, 5, false);
  const SplitPlan plan = make_splits(100, 4, 1);
  for (std::size_t s = 0; s < plan.subset_count(); ++s) {
    const Dataset train = inst.data.subset(plan.training_rows(s));
    const Dataset valid = inst.data.subset(plan.validation_rows(s));
    const auto ws = resolve_weighting(weighting::InverseInstrumentGram{}, plain, train);
    const auto est = estimate_mpec(m, train, ws);
    const MpecValidation val = validate_mpec(m, est.theta, est.sigma, valid, ws.matrix);
    CHECK(val.feasible);
    CHECK(val.violation <= 1e-8);
    CHECK(std::abs(val.score - validate_on_complement(plain, est.theta, inst.data, plan, s,
                                                      ws.matrix)) < 1e-8);

    // Moving one coordinate of θ by +1 makes the held-out fit worse.
    Eigen::VectorXd wrong = est.theta;
    wrong(1) += 1.0;
    CHECK(validate_mpec(m, wrong, est.sigma, valid, ws.matrix).score > val.score);
  }
}

TEST_CASE("zero-noise data validates to zero") {
  auto inst = oracle::random_iv_instance(60, 2, 3, 5);
  Eigen::VectorXd beta(2);
  beta << 0.8, -1.3;
  inst.y = inst.x * beta;
  RowMatrix rows = inst.data.matrix();
  rows.col(0) = inst.y;
  const Dataset data(rows);
  const ConstrainedModel m = eliminable_linear_model("lin", 2, 3, false);
  const SplitPlan plan = make_splits(60, 2, 1);
  const Dataset train = data.subset(plan.training_rows(0));
  const auto est = estimate_mpec(m, train, weighting::Identity{});
  CHECK((est.theta - beta).cwiseAbs().maxCoeff() < 1e-6);
  const auto val = validate_mpec(m, est.theta, est.sigma, data.subset(plan.validation_rows(0)),
                                 Eigen::MatrixXd::Identity(3, 3));
  CHECK(val.score < 1e-12);
}

TEST_CASE("cross_validate_mpec reproduces cross_validate on eliminated forms") {
  for (int i = 0; i < 6; ++i) {
    CAPTURE(i);
    const auto inst = oracle::random_iv_instance(100, 3, 5, 1000 + i);
    const std::vector<Index> small{0};
    const std::vector<ConstrainedModel> mpec{eliminable_linear_model("small", 3, 5, false, small),
                                             eliminable_linear_model("full", 3, 5, false)};
    const std::vector<MomentModel> plain{eliminated_linear_model("small", 3, 5, false, small),
                                         eliminated_linear_model("full", 3, 5, false)};
    const int r = 2 + i % 3;
    const CvReport a = cross_validate_mpec(mpec, inst.data, r, 1, weighting::InverseInstrumentGram{});
    const CvReport b = cross_validate(plain, inst.data, r, 1, weighting::InverseInstrumentGram{},
                                      linear_optimizer());
    CHECK(a.selected == b.selected);
    for (std::size_t m = 0; m < 2; ++m) {
      CHECK_FALSE(a.models[m].failed);
      CHECK(std::abs(a.models[m].mean - b.models[m].mean) < 1e-8);
      for (std::size_t s = 0; s < a.plan.subset_count(); ++s) {
        CHECK(std::abs(a.models[m].scores[s] - b.models[m].scores[s]) < 1e-8);
        CHECK((a.models[m].thetas[s] - b.models[m].thetas[s]).cwiseAbs().maxCoeff() < 1e-6);
      }
    }
  }
}

TEST_CASE("cross_validate_mpec: parallelism, shuffling and a single model") {
  const auto inst = oracle::random_iv_instance(80, 2, 3, 3);
  const std::vector<ConstrainedModel> one{eliminable_linear_model("only", 2, 3, false)};
  CvOptions seq, par;
  par.parallelism = 3;
  seq.shuffle_seed = par.shuffle_seed = 11;
  const CvReport a = cross_validate_mpec(one, inst.data, 3, 1, weighting::Identity{}, {}, seq);
  const CvReport b = cross_validate_mpec(one, inst.data, 3, 1, weighting::Identity{}, {}, par);
  CHECK(a.selected == 0);
  CHECK(a.models[0].scores == b.models[0].scores);
  CHECK(a.permutation == b.permutation);
  CHECK(a.permutation.size() == 80);
}

namespace {

// η_t² = y_t, moment η_t² − θ. Feasible only where y ≥ 0.
ConstrainedModel square_root_model() {
  ConstrainedModel m;
  m.name = "sqrt";
  m.theta_dim = 1;
  m.eta_per_obs = 1;
  m.q = 1;
  m.instrument_count = 1;
  m.theta_box = ParamBox::uniform(1, -10, 10);
  m.moment = [](const ObsRef&, const Eigen::VectorXd& th, const Eigen::VectorXd&,
                const ConstVecRef& eta, VecRef out) { out(0) = eta(0) * eta(0) - th(0); };
  m.obs_constraints = 1;
  m.obs_constraint = [](const ObsRef& v, const Eigen::VectorXd&, const Eigen::VectorXd&,
                        const ConstVecRef& eta, VecRef out) { out(0) = eta(0) * eta(0) - v(0); };
  return m;
}

// η_t = y_t, moment η_t − θ.
ConstrainedModel level_model() {
  ConstrainedModel m = square_root_model();
  m.name = "level";
  m.moment = [](const ObsRef&, const Eigen::VectorXd& th, const Eigen::VectorXd&,
                const ConstVecRef& eta, VecRef out) { out(0) = eta(0) - th(0); };
  m.obs_constraint = [](const ObsRef& v, const Eigen::VectorXd&, const Eigen::VectorXd&,
                        const ConstVecRef& eta, VecRef out) { out(0) = eta(0) - v(0); };
  return m;
}

}  // namespace

TEST_CASE("infeasible validation constraints give an infinite score and disqualify") {
  RowMatrix rows(40, 1);
  for (Index t = 0; t < 40; ++t) rows(t, 0) = 1.0 + 0.05 * static_cast<double>(t % 7);
  rows(33, 0) = -0.5;
  const Dataset data(rows);

  const Dataset first = data.subset(make_splits(40, 2, 1).training_rows(0));
  const auto est = estimate_mpec(square_root_model(), first, weighting::Identity{});
  double mean = 0.0;
  for (Index t = 0; t < 20; ++t) mean += rows(t, 0) / 20.0;
  CHECK(est.theta(0) == doctest::Approx(mean).epsilon(1e-8));
  CHECK(est.objective < 1e-14);

  const auto val = validate_mpec(square_root_model(), est.theta, est.sigma,
                                 data.subset(make_splits(40, 2, 1).validation_rows(0)),
                                 Eigen::MatrixXd::Identity(1, 1));
  CHECK_FALSE(val.feasible);
  CHECK(std::isinf(val.score));
  CHECK(val.violation == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(val.diagnostic.find("violation") != std::string::npos);

  const CvReport rep = cross_validate_mpec({square_root_model(), level_model()}, data, 2, 1,
                                           weighting::Identity{});
  CHECK(rep.models[0].failed);
  CHECK(std::isinf(rep.models[0].mean));
  CHECK_FALSE(rep.models[1].failed);
  CHECK(rep.selected == 1);

  CHECK_THROWS_AS(cross_validate_mpec({square_root_model()}, data, 2, 1, weighting::Identity{}),
                  SelectionError);
  CHECK_THROWS_AS(estimate_mpec(square_root_model(), data, weighting::Identity{}),
                  EstimationError);
}

TEST_CASE("no constraints and no eta reduces exactly to the moment estimator") {
  const auto inst = oracle::random_iv_instance(70, 2, 4, 8);
  ConstrainedModel m;
  m.name = "plain";
  m.theta_dim = 2;
  m.q = 4;
  m.instrument_count = 4;
  m.theta_box = ParamBox::uniform(2, -50, 50);
  m.moment = [](const ObsRef& v, const Eigen::VectorXd& th, const Eigen::VectorXd&,
                const ConstVecRef&, VecRef out) {
    out = v.segment(3, 4) * (v(0) - v.segment(1, 2).dot(th));
  };
  const auto plain = oracle::iv_model(2, 4, 50.0, false);
  MpecOptions o;
  o.optimizer = linear_optimizer();
  const auto a = estimate_mpec(m, inst.data, weighting::Identity{}, o);
  const auto b = estimate(plain, inst.data, weighting::Identity{}, o.optimizer);
  CHECK(a.theta == b.theta);
  CHECK(a.objective == b.objective);
  CHECK(a.eta.cols() == 0);
}

TEST_CASE("constraint pinning eta to zero equals the pinned moment model") {
  const auto inst = oracle::random_iv_instance(70, 2, 4, 21);
  ConstrainedModel m;
  m.theta_dim = 2;
  m.eta_per_obs = 1;
  m.q = 4;
  m.theta_box = ParamBox::uniform(2, -50, 50);
  m.moment = [](const ObsRef& v, const Eigen::VectorXd& th, const Eigen::VectorXd&,
                const ConstVecRef& eta, VecRef out) {
    out = v.segment(3, 4) * (v(0) - v.segment(1, 2).dot(th) + 3.0 * eta(0));
  };
  m.obs_constraints = 1;
  m.obs_constraint = [](const ObsRef&, const Eigen::VectorXd&, const Eigen::VectorXd&,
                        const ConstVecRef& eta, VecRef out) { out(0) = eta(0); };
  const auto est = estimate_mpec(m, inst.data, weighting::Identity{});
  const Eigen::VectorXd want =
      estimate(oracle::iv_model(2, 4), inst.data, weighting::Identity{}, linear_optimizer()).theta;
  CHECK((est.theta - want).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(est.eta.cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("a shared constraint fixing sigma at the sample mean of y") {
  // σ = ȳ couples all observations; η_t = y_t − σ − x_t'θ. The estimate is
  // 2SLS on demeaned y.
  const auto inst = oracle::random_iv_instance(50, 2, 3, 13);
  ConstrainedModel m = eliminable_linear_model("demeaned", 2, 3, true);
  m.sigma_box = {};
  m.shared_constraints = 1;
  m.shared_constraint = [](const Dataset& d, const Eigen::VectorXd&, const Eigen::VectorXd& sg,
                           const Eigen::MatrixXd&, VecRef out) {
    out(0) = sg(0) - d.matrix().col(0).mean();
  };
  const auto est = estimate_mpec(m, inst.data, weighting::InverseInstrumentGram{});
  const double ybar = inst.y.mean();
  const Eigen::VectorXd centered = inst.y.array() - ybar;
  CHECK(std::abs(est.sigma(0) - ybar) < 1e-8);
  CHECK((est.theta - oracle::tsls(inst.x, inst.z, centered)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(est.feasibility <= 1e-8);
}

TEST_CASE("consistency experiment through the constrained path matches the plain path") {
  NullDesign d;
  d.gap1 = 0.0;
  d.gap2 = 0.3;
  d.reps = 60;
  OptimizerConfig opt;
  opt.starts = 1;
  opt.simplex = false;
  const auto plain = run_consistency_study(d, {100, 400}, opt, false);
  const auto mpec = run_consistency_study(d, {100, 400}, opt, true);
  for (std::size_t i = 0; i < plain.size(); ++i) {
    CHECK(mpec[i].failures == 0);
    CHECK(std::abs(plain[i].accuracy - mpec[i].accuracy) <= 0.05);
  }
  CHECK(plain[1].accuracy >= plain[0].accuracy - 0.05);
}

TEST_CASE("random equivalence check agrees across paths and parallelism") {
  MpecCheckDesign d;
  d.instances = 6;
  d.T = 80;
  OptimizerConfig opt;
  opt.starts = 1;
  opt.simplex = false;
  const auto a = run_mpec_check(d, opt, 1);
  const auto b = run_mpec_check(d, opt, 3);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(i);
    CHECK(a[i].error.empty());
    CHECK(a[i].p == 2 + static_cast<Index>(i) % 3);
    CHECK(a[i].theta_gap < 1e-6);
    CHECK(a[i].profile_gap < 1e-8);
    CHECK(a[i].score_gap < 1e-8);
    CHECK(a[i].selected_mpec == a[i].selected_gmm);
    CHECK(a[i].theta_gap == b[i].theta_gap);
  }
  const Dataset x = random_linear_iv_data(10, 2, 3, 4, 0), y = random_linear_iv_data(10, 2, 3, 4, 0);
  CHECK(x.matrix() == y.matrix());
  CHECK(x.matrix() != random_linear_iv_data(10, 2, 3, 4, 1).matrix());
}
