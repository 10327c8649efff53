#include <doctest.h>

#include <cmath>
#include <limits>

#include "gmmcv/errors.hpp"
#include "gmmcv/selection.hpp"
#include "support/oracles.hpp"

using namespace gmmcv;

namespace {

MomentModel mean_model(std::string name, double lo = -10, double hi = 10) {
  MomentModel m;
  m.name = std::move(name);
  m.p = 1;
  m.q = 1;
  m.instrument_count = 1;
  m.box = ParamBox{Eigen::VectorXd::Constant(1, lo), Eigen::VectorXd::Constant(1, hi)};
  m.moment = [](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) { out(0) = v(0) - th(0); };
  return m;
}

Dataset column(const std::vector<double>& values) {
  RowMatrix rows(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) rows(static_cast<Index>(i), 0) = values[i];
  return Dataset(rows);
}

OptimizerConfig lm_only() {
  OptimizerConfig c;
  c.starts = 1;
  c.simplex = false;
  return c;
}

std::vector<Index> range(Index a, Index b) {
  std::vector<Index> out;
  for (Index i = a; i < b; ++i) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("fold construction follows the floor formula") {
  SUBCASE("exact division") {
    const auto plan = make_splits(6, 3, 1);
    CHECK(plan.fold(0) == range(0, 2));
    CHECK(plan.fold(1) == range(2, 4));
    CHECK(plan.fold(2) == range(4, 6));
    CHECK(plan.subset_count() == 3);
  }
  SUBCASE("T=7, r=3") {
    const auto plan = make_splits(7, 3, 1);
    CHECK(plan.fold(0) == range(0, 2));
    CHECK(plan.fold(1) == range(2, 4));
    CHECK(plan.fold(2) == range(4, 7));
  }
  SUBCASE("T=5, r=2, k=1") {
    const auto plan = make_splits(5, 2, 1);
    CHECK(plan.fold(0) == range(0, 2));
    CHECK(plan.fold(1) == range(2, 5));
    REQUIRE(plan.subset_count() == 2);
    CHECK(plan.training_subsets[0] == std::vector<int>{0});
    CHECK(plan.training_subsets[1] == std::vector<int>{1});
    CHECK(plan.validation_rows(0) == range(2, 5));
  }
  SUBCASE("lexicographic subsets and counts") {
    const auto plan = make_splits(20, 5, 2);
    CHECK(plan.subset_count() == 10);
    CHECK(plan.training_subsets.front() == std::vector<int>{0, 1, 2});
    CHECK(plan.training_subsets[1] == std::vector<int>{0, 1, 3});
    CHECK(plan.training_subsets.back() == std::vector<int>{2, 3, 4});
    for (std::size_t s = 0; s < plan.subset_count(); ++s)
      CHECK(plan.training_rows(s).size() + plan.validation_rows(s).size() == 20);
  }
  SUBCASE("folds are disjoint, contiguous and cover every index") {
    for (Index T : {7, 13, 100}) {
      for (int r = 2; r <= 7 && r <= T; ++r) {
        const auto plan = make_splits(T, r, 1);
        Index next = 0;
        for (int j = 0; j < r; ++j) {
          for (Index t : plan.fold(j)) CHECK(t == next++);
        }
        CHECK(next == T);
        CHECK(static_cast<double>(plan.subset_count()) == binomial(r, 1));
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(make_splits(3, 4, 1), ConfigurationError);
    CHECK_THROWS_AS(make_splits(10, 3, 3), ConfigurationError);
    CHECK_THROWS_AS(make_splits(10, 3, 0), ConfigurationError);
    CHECK_THROWS_AS(make_splits(10, 1, 1), ConfigurationError);
  }
}

TEST_CASE("training and validation on the sample-mean model") {
  const auto m = mean_model("mean");
  const Dataset d = column({1, 2, 3, 4});
  const auto plan = make_splits(4, 2, 1);
  const auto fit0 = train_on_subset(m, d, plan, 0, weighting::Identity{}, lm_only());
  const auto fit1 = train_on_subset(m, d, plan, 1, weighting::Identity{}, lm_only());
  CHECK(std::abs(fit0.theta(0) - 1.5) < 1e-9);
  CHECK(std::abs(fit1.theta(0) - 3.5) < 1e-9);
  CHECK(validate_on_complement(m, fit0.theta, d, plan, 0, fit0.weight) ==
        doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("subset training matches subset 2SLS and validation matches the dense oracle") {
  const auto inst = oracle::random_iv_instance(90, 2, 4, 77);
  const auto model = oracle::iv_model(2, 4);
  const auto plan = make_splits(90, 3, 1);
  for (std::size_t s = 0; s < plan.subset_count(); ++s) {
    const auto rows = plan.training_rows(s);
    Eigen::MatrixXd x(rows.size(), 2), z(rows.size(), 4);
    Eigen::VectorXd y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Index>(i)) = inst.x.row(rows[i]);
      z.row(static_cast<Index>(i)) = inst.z.row(rows[i]);
      y(static_cast<Index>(i)) = inst.y(rows[i]);
    }
    const auto fit = train_on_subset(model, inst.data, plan, s, weighting::InverseInstrumentGram{}, lm_only());
    CHECK((fit.theta - oracle::tsls(x, z, y)).cwiseAbs().maxCoeff() < 1e-8);
    const Eigen::MatrixXd w_s = (z.transpose() * z / static_cast<double>(rows.size())).inverse();
    CHECK((fit.weight - w_s).cwiseAbs().maxCoeff() < 1e-9 * w_s.cwiseAbs().maxCoeff());

    const auto vrows = plan.validation_rows(s);
    Eigen::MatrixXd xv(vrows.size(), 2), zv(vrows.size(), 4);
    Eigen::VectorXd yv(vrows.size());
    for (std::size_t i = 0; i < vrows.size(); ++i) {
      xv.row(static_cast<Index>(i)) = inst.x.row(vrows[i]);
      zv.row(static_cast<Index>(i)) = inst.z.row(vrows[i]);
      yv(static_cast<Index>(i)) = inst.y(vrows[i]);
    }
    const double expected = oracle::iv_objective(xv, zv, yv, fit.theta, fit.weight);
    const double got = validate_on_complement(model, fit.theta, inst.data, plan, s, fit.weight);
    CHECK(std::abs(got - expected) < 1e-12 * std::max(1.0, expected));
  }
}

TEST_CASE("cross_validate selects the fixed true-mean model on noiseless data") {
  const Dataset d = column({2, 2, 2, 2, 2, 2});
  const auto free_model = mean_model("free", -10, 10);
  const auto fixed_true = mean_model("fixed", 2, 2);
  const auto fixed_wrong = mean_model("wrong", 3, 3);
  const auto report = cross_validate({fixed_wrong, fixed_true}, d, 2, 1, weighting::Identity{}, lm_only());
  CHECK(report.models[1].mean == 0.0);
  CHECK(report.selected == 1);
  CHECK(report.models[0].scores.size() == 2);
  // Free model also scores 0; the lower index wins the tie.
  const auto tie = cross_validate({free_model, fixed_true}, d, 2, 1, weighting::Identity{}, lm_only());
  CHECK(tie.selected == 0);
}

TEST_CASE("averaging identity and parallel determinism") {
  const auto inst = oracle::random_iv_instance(60, 2, 4, 5);
  std::vector<MomentModel> models{oracle::iv_model(2, 4), oracle::iv_model(2, 4, 3.0)};
  auto third = oracle::iv_model(1, 4);
  third.moment = [](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) {
    out = (v(0) - v(1) * th(0)) * v.segment(3, 4);
  };
  third.jacobian = nullptr;
  models.push_back(third);
  const auto a = cross_validate(models, inst.data, 4, 2, weighting::InverseInstrumentGram{}, lm_only());
  const auto b = cross_validate(models, inst.data, 4, 2, weighting::InverseInstrumentGram{}, lm_only(),
                                CvOptions{8, std::nullopt});
  for (std::size_t m = 0; m < models.size(); ++m) {
    CHECK(a.models[m].scores.size() == 6);
    double sum = 0;
    for (double s : a.models[m].scores) sum += s;
    CHECK(a.models[m].mean == sum / 6.0);
    CHECK(a.models[m].scores == b.models[m].scores);
  }
  CHECK(a.selected == b.selected);
}

TEST_CASE("failed models are disqualified") {
  const Dataset d = column({1, 2, 3, 4});
  auto broken = mean_model("broken");
  broken.moment = [](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) {
    if (v(0) > 3.5) throw DataError("bad row");
    out(0) = v(0) - th(0);
  };
  const auto ok = mean_model("ok", 5, 5);
  const auto report = cross_validate({broken, ok}, d, 2, 1, weighting::Identity{}, lm_only());
  CHECK(report.models[0].failed);
  CHECK_FALSE(report.models[0].failure.empty());
  CHECK(report.selected == 1);
  CHECK_THROWS_AS(cross_validate({broken}, d, 2, 1, weighting::Identity{}, lm_only()), SelectionError);
}

TEST_CASE("pre-shuffle is recorded and reproducible") {
  const Dataset d = column({1, 2, 3, 4, 5, 6, 7, 8});
  CvOptions opt;
  opt.shuffle_seed = 9;
  const auto a = cross_validate({mean_model("m")}, d, 2, 1, weighting::Identity{}, lm_only(), opt);
  const auto b = cross_validate({mean_model("m")}, d, 2, 1, weighting::Identity{}, lm_only(), opt);
  CHECK(a.permutation.size() == 8);
  CHECK(a.permutation == b.permutation);
  CHECK(a.models[0].scores == b.models[0].scores);
}

TEST_CASE("information criteria arithmetic") {
  CHECK(gmm_aic(0.5, 100, 10, 3) == doctest::Approx(36.0));
  CHECK(gmm_bic(0.5, 100, 10, 3) == doctest::Approx(50.0 - 7.0 * std::log(100.0)));
  CHECK(gmm_bic(0.5, 100, 10, 3) == doctest::Approx(17.76381).epsilon(1e-6));
  CHECK(gmm_aic(0.25, 40, 4, 4) == doctest::Approx(10.0));
  CHECK(gmm_bic(0.25, 40, 4, 4) == doctest::Approx(10.0));
}

TEST_CASE("minimand selection and information criteria") {
  const auto inst = oracle::random_iv_instance(100, 2, 4, 8);
  // Model 2 nests model 1 (model 1 restricts the second coefficient to 0).
  auto restricted = oracle::iv_model(2, 4);
  restricted.box.lower(1) = restricted.box.upper(1) = 0.0;
  const auto general = oracle::iv_model(2, 4);
  const auto res = select_by_gmm_minimand({restricted, general}, inst.data, weighting::Identity{}, lm_only());
  CHECK(res.scores[1] <= res.scores[0] + 1e-9);
  CHECK(res.selected == 1);
  // Same (c, p) everywhere: penalties cancel and AIC/BIC agree with the minimand.
  std::vector<MomentModel> same{oracle::iv_model(2, 4), oracle::iv_model(2, 4, 0.2)};
  const auto gmm = select_by_gmm_minimand(same, inst.data, weighting::Identity{}, lm_only());
  const auto aic = information_criterion(gmm, same, 100, Criterion::GMM_AIC);
  const auto bic = information_criterion(gmm, same, 100, Criterion::GMM_BIC);
  CHECK(aic.selected == gmm.selected);
  CHECK(bic.selected == gmm.selected);
  CHECK(aic.scores[0] == doctest::Approx(100 * gmm.scores[0] - 4.0));
  CHECK_THROWS_AS(information_criterion(gmm, same, 100, Criterion::CV), ConfigurationError);
}

TEST_CASE("tie-breaking and criterion names") {
  CHECK(select_minimum({1.0, 1.0 + 1e-13, 0.5 + 0.5}, {}) == 0);
  CHECK(select_minimum({2.0, 1.0, 1.0}, {}) == 1);
  CHECK(select_minimum({0.0, 1.0}, {true, false}) == 1);
  CHECK(select_minimum({std::numeric_limits<double>::infinity(), 3.0}, {}) == 1);
  CHECK(select_minimum({1.0}, {true}) == -1);
  for (auto c : {Criterion::CV, Criterion::GMM, Criterion::GMM_AIC, Criterion::GMM_BIC})
    CHECK(parse_criterion(to_string(c)) == c);
  CHECK_THROWS_AS(parse_criterion("aic"), ConfigurationError);
}
