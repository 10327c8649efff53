#include <algorithm>
#include <cmath>

#include "gmmcv/errors.hpp"
#include "gmmcv/mpec.hpp"
#include "gmmcv/parallel.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

Dataset random_linear_iv_data(Index T, Index p, Index c, std::uint64_t seed,
                              std::uint64_t stream) {
  if (T < 1 || p < 1 || c < p) throw ConfigurationError("random instance needs T ≥ 1 and c ≥ p ≥ 1");
  RandomStream rng(derive_seed(seed, 0x4d504543ull), stream);
  Eigen::MatrixXd pi(c, p);
  for (Index i = 0; i < c; ++i)
    for (Index j = 0; j < p; ++j) pi(i, j) = i == j ? 1.0 : 0.3 * rng.normal();
  Eigen::VectorXd beta(p);
  for (Index j = 0; j < p; ++j) beta(j) = rng.normal();
  RowMatrix rows(T, 1 + p + c);
  Eigen::VectorXd z(c);
  for (Index t = 0; t < T; ++t) {
    for (Index i = 0; i < c; ++i) z(i) = rng.normal();
    const double u = rng.normal();
    double y = u;
    for (Index j = 0; j < p; ++j) {
      const double x = z.dot(pi.col(j)) + 0.5 * u + rng.normal();
      rows(t, 1 + j) = x;
      y += x * beta(j);
    }
    rows(t, 0) = y;
    rows.row(t).tail(c) = z.transpose();
  }
  return Dataset(std::move(rows));
}

void validate_mpec_check(const MpecCheckDesign& d) {
  if (d.instances < 1) throw ConfigurationError("mpec.instances must be at least 1");
  if (d.max_p < 1) throw ConfigurationError("mpec.max_p must be at least 1");
  if (d.max_extra < 0) throw ConfigurationError("mpec.max_extra_instruments must be nonnegative");
  (void)make_splits(d.T, d.r, d.k);
  validate_mpec_options(d.options);
}

std::vector<MpecCheckRow> run_mpec_check(const MpecCheckDesign& design,
                                         const OptimizerConfig& opt, int parallelism) {
  validate_mpec_check(design);
  std::vector<MpecCheckRow> rows(static_cast<std::size_t>(design.instances));
  parallel_for(rows.size(), parallelism, [&](std::size_t i) {
    MpecCheckRow& row = rows[i];
    const int n = static_cast<int>(i);
    row.instance = n;
    row.p = 2 + n % design.max_p;
    row.c = row.p + n % (design.max_extra + 1);
    try {
      const Dataset data = random_linear_iv_data(design.T, row.p, row.c, design.seed, i);
      const std::vector<Index> first{0};
      const std::vector<ConstrainedModel> mpec{
          eliminable_linear_model("first", row.p, row.c, false, first),
          eliminable_linear_model("all", row.p, row.c, false)};
      const std::vector<MomentModel> plain{
          eliminated_linear_model("first", row.p, row.c, false, first),
          eliminated_linear_model("all", row.p, row.c, false)};
      const WeightingSpec w = weighting::InverseInstrumentGram{};

      const ResolvedWeighting ws = resolve_weighting(w, plain[1], data);
      const GmmEstimate gmm = estimate(plain[1], data, ws, opt);
      const ConstrainedEstimate con = estimate_mpec(mpec[1], data, ws, design.options);
      row.theta_gap = (con.theta - gmm.theta).cwiseAbs().maxCoeff();

      for (int g = 0; g < 10; ++g) {
        const Eigen::VectorXd th =
            gmm.theta + Eigen::VectorXd::Constant(row.p, 0.2 * (g - 4.5));
        const double v_mpec = profile_mpec(mpec[1], data, th, ws.matrix, design.options);
        const double v_gmm = evaluate_objective(plain[1], data, th, ws.matrix);
        row.profile_gap = std::max(row.profile_gap, std::abs(v_mpec - v_gmm));
      }

      const CvReport a = cross_validate_mpec(mpec, data, design.r, design.k, w, design.options);
      const CvReport b = cross_validate(plain, data, design.r, design.k, w, opt);
      row.selected_mpec = a.selected;
      row.selected_gmm = b.selected;
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t s = 0; s < a.models[m].scores.size(); ++s)
          row.score_gap =
              std::max(row.score_gap, std::abs(a.models[m].scores[s] - b.models[m].scores[s]));
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  return rows;
}

}  // namespace gmmcv
