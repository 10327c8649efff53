#include "gmmcv/conduct_lab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <map>

#include "gmmcv/errors.hpp"
#include "gmmcv/parallel.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

// ---------------------------------------------------------------------------
// Partitions

Partition::Partition(std::vector<std::vector<int>> groups, int J) : J_(J) {
  if (J < 1) throw ConfigurationError("partition needs J >= 1");
  group_of_.assign(static_cast<std::size_t>(J), -1);
  for (auto& g : groups) {
    if (g.empty()) throw ConfigurationError("partition groups must be nonempty");
    std::sort(g.begin(), g.end());
    for (int f : g) {
      if (f < 0 || f >= J) throw ConfigurationError("firm index out of range in partition");
      if (group_of_[static_cast<std::size_t>(f)] != -1)
        throw ConfigurationError("firm appears in two groups");
      group_of_[static_cast<std::size_t>(f)] = 0;
    }
  }
  for (int v : group_of_)
    if (v < 0) throw ConfigurationError("partition does not cover every firm");
  std::sort(groups.begin(), groups.end());
  groups_ = std::move(groups);
  for (std::size_t g = 0; g < groups_.size(); ++g)
    for (int f : groups_[g]) group_of_[static_cast<std::size_t>(f)] = static_cast<int>(g);
}

Partition Partition::parse(const std::string& text, int J) {
  std::vector<std::vector<int>> groups;
  std::size_t i = 0;
  auto skip = [&] {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  skip();
  while (i < text.size()) {
    if (text[i] != '{') throw ConfigurationError("malformed partition '" + text + "'");
    ++i;
    std::vector<int> g;
    for (;;) {
      skip();
      std::size_t used = 0;
      int firm = 0;
      try {
        firm = std::stoi(text.substr(i), &used);
      } catch (const std::exception&) {
        throw ConfigurationError("malformed partition '" + text + "'");
      }
      i += used;
      g.push_back(firm - 1);
      skip();
      if (i < text.size() && text[i] == ',') {
        ++i;
        continue;
      }
      if (i < text.size() && text[i] == '}') {
        ++i;
        break;
      }
      throw ConfigurationError("malformed partition '" + text + "'");
    }
    groups.push_back(std::move(g));
    skip();
  }
  return Partition(std::move(groups), J);
}

std::string Partition::label() const {
  std::string out;
  for (const auto& g : groups_) {
    out += '{';
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(g[i] + 1);
    }
    out += '}';
  }
  return out;
}

std::vector<Partition> enumerate_partitions(int J) {
  if (J < 1 || J > 8)
    throw ConfigurationError("enumerate_partitions supports 1 <= J <= 8 (got " + std::to_string(J) + ")");
  std::vector<Partition> out;
  // Restricted growth strings a[0]=0, a[i] <= 1 + max(a[0..i-1]).
  std::vector<int> a(static_cast<std::size_t>(J), 0);
  std::function<void(int, int)> rec = [&](int pos, int top) {
    if (pos == J) {
      std::vector<std::vector<int>> groups(static_cast<std::size_t>(top + 1));
      for (int f = 0; f < J; ++f) groups[static_cast<std::size_t>(a[static_cast<std::size_t>(f)])].push_back(f);
      out.emplace_back(std::move(groups), J);
      return;
    }
    for (int v = 0; v <= top + 1; ++v) {
      a[static_cast<std::size_t>(pos)] = v;
      rec(pos + 1, std::max(top, v));
    }
  };
  rec(1, 0);
  std::stable_sort(out.begin(), out.end(), [](const Partition& x, const Partition& y) {
    if (x.groups().size() != y.groups().size()) return x.groups().size() > y.groups().size();
    return x.groups() < y.groups();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Demand and pricing

Eigen::VectorXd logit_shares(const Eigen::VectorXd& delta) {
  // Shift by max(0, max δ) so neither the inside goods nor the outside
  // option overflows.
  const double shift = std::max(0.0, delta.size() ? delta.maxCoeff() : 0.0);
  const Eigen::VectorXd e = (delta.array() - shift).exp().matrix();
  return e / (std::exp(-shift) + e.sum());
}

Eigen::MatrixXd delta_matrix(const Partition& partition, const Eigen::VectorXd& s, double alpha,
                             double market_size) {
  const int J = partition.J();
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(J, J);
  for (int j = 0; j < J; ++j) {
    for (int r = 0; r < J; ++r) {
      if (partition.group_of(j) != partition.group_of(r)) continue;
      d(j, r) = j == r ? -alpha * s(j) * (1.0 - s(j)) * market_size
                       : alpha * s(j) * s(r) * market_size;
    }
  }
  return d;
}

namespace {

// K^{-1}s per group where Δ_g = α·M·K_g; the markup is this divided by α.
// K = −diag(s)(I − 1s'), so K^{-1}s = −(I − 1s')^{-1}1, which stays well
// conditioned when the shares are tiny.
Eigen::VectorXd markup_numerators(const Partition& partition, const Eigen::VectorXd& s) {
  if (!(s.minCoeff() >= 0.0))
    throw DataError("negative share in markup computation");
  Eigen::VectorXd out(partition.J());
  for (const auto& g : partition.groups()) {
    const auto n = static_cast<Index>(g.size());
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n);
    for (Index a = 0; a < n; ++a)
      for (Index b = 0; b < n; ++b) m(a, b) -= s(g[static_cast<std::size_t>(b)]);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    if (lu.rank() < n || !(std::abs(lu.determinant()) > 1e-14))
      throw DataError("singular within-group price-derivative matrix (the group's shares leave "
                      "no outside share)");
    const Eigen::VectorXd c = lu.solve(Eigen::VectorXd::Constant(n, -1.0));
    for (Index a = 0; a < n; ++a) out(g[static_cast<std::size_t>(a)]) = c(a);
  }
  return out;
}

}  // namespace

Eigen::VectorXd group_markups(const Partition& partition, const Eigen::VectorXd& shares,
                              double alpha) {
  return markup_numerators(partition, shares) / alpha;
}

EquilibriumResult solve_equilibrium_prices(const Partition& partition, double alpha,
                                           const Eigen::VectorXd& utility,
                                           const Eigen::VectorXd& mc, double market_size) {
  if (!(alpha < 0)) throw ConfigurationError("price coefficient alpha must be negative");
  const int J = partition.J();
  if (utility.size() != J || mc.size() != J)
    throw ConfigurationError("utility and cost vectors must have length J");

  // Markup form of the FOC: F(p) = (p − mc) − Δ(p)^{-1}D(p).
  auto residual = [&](const Eigen::VectorXd& p) -> Eigen::VectorXd {
    const Eigen::VectorXd s = logit_shares(utility + alpha * p);
    return (p - mc) - group_markups(partition, s, alpha);
  };
  auto safe_norm = [&](const Eigen::VectorXd& p) {
    try {
      const Eigen::VectorXd f = residual(p);
      return f.allFinite() ? f.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
    } catch (const DataError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  EquilibriumResult out;
  Eigen::VectorXd p = mc.array() + 1.0 / (-alpha);
  double norm = safe_norm(p);
  auto converged = [&](double n, const Eigen::VectorXd& x) {
    return n <= 1e-13 * (1.0 + x.cwiseAbs().maxCoeff());
  };

  // Damped Newton with a finite-difference Jacobian.
  for (int it = 0; it < 500 && !converged(norm, p); ++it) {
    ++out.iterations;
    const Eigen::VectorXd f = residual(p);
    Eigen::MatrixXd jac(J, J);
    for (int i = 0; i < J; ++i) {
      const double h = 1e-7 * std::max(1.0, std::abs(p(i)));
      Eigen::VectorXd pp = p, pm = p;
      pp(i) += h;
      pm(i) -= h;
      jac.col(i) = (residual(pp) - residual(pm)) / (2 * h);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (lu.rank() < J) break;
    const Eigen::VectorXd step = lu.solve(-f);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      const Eigen::VectorXd cand = p + t * step;
      const double n = safe_norm(cand);
      if (n < norm) {
        p = cand;
        norm = n;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }

  if (!converged(norm, p)) {
    // Nested fixed point: sweep the groups, solving each group's markup
    // equation m = 1/(−α(1 − S_g(m))) by bisection with the others fixed.
    out.used_fallback = true;
    Eigen::VectorXd markups = Eigen::VectorXd::Constant(static_cast<Index>(partition.groups().size()),
                                                        1.0 / (-alpha));
    auto prices_from = [&](const Eigen::VectorXd& m) {
      Eigen::VectorXd pr = mc;
      for (std::size_t g = 0; g < partition.groups().size(); ++g)
        for (int f : partition.groups()[g]) pr(f) += m(static_cast<Index>(g));
      return pr;
    };
    for (int sweep = 0; sweep < 500; ++sweep) {
      ++out.iterations;
      const Eigen::VectorXd before = markups;
      for (std::size_t g = 0; g < partition.groups().size(); ++g) {
        auto gap = [&](double m) {
          Eigen::VectorXd trial = markups;
          trial(static_cast<Index>(g)) = m;
          const Eigen::VectorXd s = logit_shares(utility + alpha * prices_from(trial));
          double sg = 0.0;
          for (int f : partition.groups()[g]) sg += s(f);
          return m - 1.0 / (-alpha * (1.0 - sg));
        };
        double lo = 1.0 / (-alpha), hi = 2.0 * lo;
        while (gap(hi) < 0 && hi < 1e12) hi *= 2.0;
        for (int b = 0; b < 200 && hi - lo > 1e-15 * hi; ++b) {
          const double mid = 0.5 * (lo + hi);
          (gap(mid) < 0 ? lo : hi) = mid;
        }
        markups(static_cast<Index>(g)) = 0.5 * (lo + hi);
      }
      if ((markups - before).cwiseAbs().maxCoeff() <= 1e-14 * (1.0 + markups.cwiseAbs().maxCoeff()))
        break;
    }
    p = prices_from(markups);
    norm = safe_norm(p);
    if (!std::isfinite(norm) || norm > 1e-9 * (1.0 + p.cwiseAbs().maxCoeff()))
      throw EstimationError("equilibrium price solver did not converge (markup residual " +
                                std::to_string(norm) + ")",
                            p, norm);
  }

  out.prices = p;
  out.shares = logit_shares(utility + alpha * p);
  const Eigen::VectorXd demand = out.shares * market_size;
  out.foc_residual =
      (demand - delta_matrix(partition, out.shares, alpha, market_size) * (p - mc)).cwiseAbs().maxCoeff();
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

void validate_scenario(const ConductScenario& s) {
  if (s.J < 1 || s.J > 8) throw ConfigurationError("conduct.J must lie in [1, 8]");
  if (s.T < 1) throw ConfigurationError("conduct.T must be positive");
  if (!(s.alpha < 0)) throw ConfigurationError("conduct.alpha must be negative");
  if (!(s.char_sd > 0)) throw ConfigurationError("conduct.char_sd must be positive");
  if (!(s.shock_sd > 0)) throw ConfigurationError("conduct.shock_sd must be positive");
  if (!(s.market_size > 0)) throw ConfigurationError("conduct.market_size must be positive");
  if (s.true_partition.J() != s.J) throw ConfigurationError("true partition does not match J");
}

MarketPanel simulate_panel(const ConductScenario& sc, std::uint64_t rep_index) {
  validate_scenario(sc);
  RandomStream rng(derive_seed(sc.seed, 0x434f4e44ull + static_cast<std::uint64_t>(sc.T)), rep_index);
  MarketPanel panel;
  panel.J = sc.J;
  for (Index t = 0; t < sc.T; ++t) {
    Market m;
    const int J = sc.J;
    m.X.resize(J, 2);
    m.Y.resize(J, 3);
    m.xi.resize(J);
    m.lambda.resize(J);
    for (int j = 0; j < J; ++j) {
      const double x = rng.normal(0.0, sc.char_sd);
      const double w = rng.normal(0.0, sc.char_sd);
      m.X.row(j) << 1.0, x;
      m.Y.row(j) << 1.0, x, w;
    }
    for (int j = 0; j < J; ++j) {
      m.xi(j) = rng.normal(0.0, sc.shock_sd);
      m.lambda(j) = rng.normal(0.0, sc.shock_sd);
    }
    m.mc = m.Y * sc.gamma + m.lambda;
    m.market_size = sc.market_size;
    const Eigen::VectorXd utility = m.X * sc.beta + m.xi;
    const EquilibriumResult eq =
        solve_equilibrium_prices(sc.true_partition, sc.alpha, utility, m.mc, sc.market_size);
    if (!(eq.foc_residual < 1e-10))
      throw EstimationError("equilibrium FOC residual " + std::to_string(eq.foc_residual) +
                                " above tolerance",
                            eq.prices, eq.foc_residual);
    m.prices = eq.prices;
    m.shares = eq.shares;
    m.foc_residual = eq.foc_residual;
    panel.markets.push_back(std::move(m));
  }
  return panel;
}

// ---------------------------------------------------------------------------
// Instruments and moments

std::string to_string(InstrumentSource s) {
  return s == InstrumentSource::Demand ? "demand" : "demand_cost";
}

InstrumentSource parse_instrument_source(const std::string& s) {
  if (s == "demand") return InstrumentSource::Demand;
  if (s == "demand_cost") return InstrumentSource::DemandAndCost;
  throw ConfigurationError("unknown instrument source '" + s + "' (expected demand or demand_cost)");
}

InstrumentLayout plan_instruments(const MarketPanel& panel, InstrumentSource source) {
  if (panel.markets.empty()) throw ConfigurationError("empty market panel");
  const Index nx = panel.markets.front().X.cols();
  const Index ny = panel.markets.front().Y.cols();
  const Index total = source == InstrumentSource::Demand ? nx : nx + ny;
  auto column = [&](const Market& m, Index c) {
    return c < nx ? Eigen::VectorXd(m.X.col(c)) : Eigen::VectorXd(m.Y.col(c - nx));
  };
  InstrumentLayout layout;
  layout.J = panel.J;
  for (Index c = 0; c < total; ++c) {
    bool constant = true;
    const double first = column(panel.markets.front(), c)(0);
    for (const auto& m : panel.markets)
      constant = constant && (column(m, c).array() == first).all();
    if (constant) continue;  // covered by the constant column
    bool duplicate = false;
    for (int kept : layout.columns) {
      bool same = true;
      for (const auto& m : panel.markets) same = same && column(m, c) == column(m, kept);
      duplicate = duplicate || same;
    }
    if (!duplicate) layout.columns.push_back(static_cast<int>(c));
  }
  return layout;
}

Eigen::MatrixXd build_instruments(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const InstrumentLayout& layout) {
  const Index J = X.rows();
  const Index n = static_cast<Index>(layout.columns.size());
  Eigen::MatrixXd z(J, layout.width());
  z.col(0).setOnes();
  for (Index i = 0; i < n; ++i) {
    const int c = layout.columns[static_cast<std::size_t>(i)];
    const Eigen::VectorXd v = c < X.cols() ? Eigen::VectorXd(X.col(c)) : Eigen::VectorXd(Y.col(c - X.cols()));
    const double mean = v.mean();
    z.col(1 + i) = v;
    z.col(1 + n + i) = v.cwiseAbs2();
    z.col(1 + 2 * n + i).setConstant(mean);
    z.col(1 + 3 * n + i).setConstant(mean * mean);
  }
  return z;
}

namespace {

// Offsets of one market row: [s(J), p(J), X(J×2), Y(J×3), Z(J×c)].
struct RowLayout {
  Index J, c;
  Index s(Index j) const { return j; }
  Index p(Index j) const { return J + j; }
  Index x(Index j) const { return 2 * J + 2 * j; }
  Index y(Index j) const { return 4 * J + 3 * j; }
  Index z(Index j) const { return 7 * J + c * j; }
  Index width() const { return J * (7 + c); }
};

void check_support(const Eigen::VectorXd& s) {
  if (!(s.minCoeff() > 0.0) || !(s.sum() < 1.0))
    throw DataError("observed shares must be positive with a positive outside share");
}

}  // namespace

Dataset conduct_dataset(const MarketPanel& panel, const InstrumentLayout& layout) {
  if (panel.markets.empty()) throw ConfigurationError("empty market panel");
  const RowLayout L{panel.J, layout.width()};
  RowMatrix rows(static_cast<Index>(panel.markets.size()), L.width());
  for (std::size_t t = 0; t < panel.markets.size(); ++t) {
    const Market& m = panel.markets[t];
    check_support(m.shares);
    if (m.market_size != 1.0)
      throw ConfigurationError("conduct moments assume unit market size");
    const Eigen::MatrixXd z = build_instruments(m.X, m.Y, layout);
    auto row = rows.row(static_cast<Index>(t));
    for (Index j = 0; j < L.J; ++j) {
      row(L.s(j)) = m.shares(j);
      row(L.p(j)) = m.prices(j);
      row.segment(L.x(j), 2) = m.X.row(j);
      row.segment(L.y(j), 3) = m.Y.row(j);
      row.segment(L.z(j), L.c) = z.row(j);
    }
  }
  return Dataset(std::move(rows));
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> conduct_residuals(const Partition& candidate,
                                                              const Market& m,
                                                              const Eigen::VectorXd& theta) {
  check_support(m.shares);
  const double alpha = theta(0);
  const Eigen::VectorXd markup = group_markups(candidate, m.shares, alpha);
  const double log_s0 = std::log(1.0 - m.shares.sum());
  Eigen::VectorXd xi = (m.shares.array().log() - log_s0).matrix() - m.X * theta.segment(1, 2) -
                       alpha * m.prices;
  Eigen::VectorXd lambda = m.prices - markup - m.Y * theta.segment(3, 3);
  return {xi, lambda};
}

MomentModel conduct_moment_model(const Partition& candidate, const InstrumentLayout& layout,
                                 const ConductBounds& bounds) {
  const RowLayout L{layout.J, layout.width()};
  if (candidate.J() != layout.J) throw ConfigurationError("candidate partition does not match J");
  MomentModel m;
  m.name = candidate.label();
  m.p = 6;
  m.q = 2 * L.c;
  m.instrument_count = 2 * L.c;
  m.box.lower.resize(6);
  m.box.upper.resize(6);
  m.box.lower << bounds.alpha_lower, Eigen::VectorXd::Constant(5, -bounds.linear);
  m.box.upper << bounds.alpha_upper, Eigen::VectorXd::Constant(5, bounds.linear);
  m.affine = {false, true, true, true, true, true};

  // Per-market state shared by the moment and its Jacobian.
  auto unpack = [L, candidate](const ObsRef& v, double alpha, Eigen::VectorXd& s,
                               Eigen::VectorXd& markup, double& log_s0) {
    s.resize(L.J);
    for (Index j = 0; j < L.J; ++j) s(j) = v(L.s(j));
    check_support(s);
    markup = group_markups(candidate, s, alpha);
    log_s0 = std::log(1.0 - s.sum());
  };

  m.moment = [L, unpack](const ObsRef& v, const Eigen::VectorXd& th, VecRef out) {
    Eigen::VectorXd s, markup;
    double log_s0 = 0.0;
    unpack(v, th(0), s, markup, log_s0);
    out.setZero();
    for (Index j = 0; j < L.J; ++j) {
      const double p = v(L.p(j));
      const double xi = std::log(s(j)) - log_s0 - th(1) * v(L.x(j)) - th(2) * v(L.x(j) + 1) - th(0) * p;
      const double lambda = p - markup(j) - th(3) * v(L.y(j)) - th(4) * v(L.y(j) + 1) -
                            th(5) * v(L.y(j) + 2);
      out.head(L.c) += xi * v.segment(L.z(j), L.c);
      out.tail(L.c) += lambda * v.segment(L.z(j), L.c);
    }
    out /= static_cast<double>(L.J);
  };

  m.jacobian = [L, unpack](const ObsRef& v, const Eigen::VectorXd& th, MatRef out) {
    Eigen::VectorXd s, markup;
    double log_s0 = 0.0;
    unpack(v, th(0), s, markup, log_s0);
    out.setZero();
    for (Index j = 0; j < L.J; ++j) {
      const auto z = v.segment(L.z(j), L.c);
      out.block(0, 0, L.c, 1) -= v(L.p(j)) * z;
      out.block(0, 1, L.c, 1) -= v(L.x(j)) * z;
      out.block(0, 2, L.c, 1) -= v(L.x(j) + 1) * z;
      // markup = c/α, so ∂λ/∂α = markup/α.
      out.block(L.c, 0, L.c, 1) += (markup(j) / th(0)) * z;
      for (Index i = 0; i < 3; ++i) out.block(L.c, 3 + i, L.c, 1) -= v(L.y(j) + i) * z;
    }
    out /= static_cast<double>(L.J);
  };

  m.instruments.fn = [L](const ObsRef& v, MatRef out) {
    for (Index j = 0; j < L.J; ++j) out.row(j) = v.segment(L.z(j), L.c).transpose();
  };
  m.instruments.rows = L.J;
  m.instruments.cols = L.c;
  m.instruments.equations = 2;
  return m;
}

// ---------------------------------------------------------------------------
// Study

void validate_conduct_design(const ConductStudyDesign& d) {
  if (d.J < 1 || d.J > 8) throw ConfigurationError("conduct.J must lie in [1, 8]");
  if (d.reps < 1) throw ConfigurationError("conduct.reps must be at least 1");
  if (d.T.empty()) throw ConfigurationError("conduct.T must list at least one sample size");
  if (d.alpha.empty()) throw ConfigurationError("conduct.alpha must list at least one value");
  if (d.truths.empty()) throw ConfigurationError("conduct.truths must list at least one partition");
  for (double a : d.alpha)
    if (!(a < 0)) throw ConfigurationError("conduct.alpha values must be negative");
  for (const auto& p : d.truths)
    if (p.J() != d.J) throw ConfigurationError("conduct.truths partition does not match conduct.J");
  for (Index T : d.T) (void)make_splits(T, d.r, d.k);
  if (!(d.bounds.alpha_lower < d.bounds.alpha_upper) || !(d.bounds.alpha_upper < 0))
    throw ConfigurationError("conduct.alpha_bounds must be increasing and negative");
  if (!(d.bounds.linear > 0)) throw ConfigurationError("conduct.linear_bound must be positive");
}

OptimizerConfig conduct_default_optimizer() {
  OptimizerConfig c;
  c.starts = 12;
  c.simplex = false;
  c.polish = true;
  c.max_evaluations = 2000;
  return c;
}

ConductRepOutcome run_conduct_replication(const ConductScenario& scenario,
                                          const ConductStudyDesign& design,
                                          const OptimizerConfig& opt, std::uint64_t rep_index) {
  ConductRepOutcome out;
  try {
    const MarketPanel panel = simulate_panel(scenario, rep_index);
    const InstrumentLayout layout = plan_instruments(panel, design.instruments);
    const Dataset data = conduct_dataset(panel, layout);
    std::vector<MomentModel> models;
    for (const auto& cand : enumerate_partitions(design.J))
      models.push_back(conduct_moment_model(cand, layout, design.bounds));
    const CvReport cv =
        cross_validate(models, data, design.r, design.k, weighting::InverseInstrumentGram{}, opt);
    for (const auto& m : cv.models) {
      if (m.failed) return out;
      out.cv_scores.push_back(m.mean);
    }
    const CriterionResult gmm =
        select_by_gmm_minimand(models, data, weighting::InverseInstrumentGram{}, opt);
    for (bool f : gmm.failed)
      if (f) return out;
    out.cv_selected = cv.selected;
    out.gmm_selected = gmm.selected;
    out.ok = true;
  } catch (const std::exception&) {
    out.ok = false;
  }
  return out;
}

ConductStudyResult run_conduct_study(const ConductStudyDesign& design, const OptimizerConfig& opt,
                                     int parallelism) {
  validate_conduct_design(design);
  ConductStudyResult result;
  result.candidates = enumerate_partitions(design.J);
  const std::size_t n_cand = result.candidates.size();

  struct CellSpec {
    double alpha;
    Index T;
    Partition truth;
  };
  std::vector<CellSpec> specs;
  for (double a : design.alpha)
    for (Index T : design.T)
      for (const auto& truth : design.truths) specs.push_back({a, T, truth});

  const auto reps = static_cast<std::size_t>(design.reps);
  std::vector<ConductRepOutcome> outcomes(specs.size() * reps);
  parallel_for(outcomes.size(), parallelism, [&](std::size_t i) {
    const CellSpec& spec = specs[i / reps];
    ConductScenario sc;
    sc.J = design.J;
    sc.T = spec.T;
    sc.alpha = spec.alpha;
    sc.beta = design.beta;
    sc.gamma = design.gamma;
    sc.char_sd = design.char_sd;
    sc.shock_sd = design.shock_sd;
    sc.market_size = design.market_size;
    sc.true_partition = spec.truth;
    sc.seed = design.seed;
    outcomes[i] = run_conduct_replication(sc, design, opt, i % reps);
  });

  for (std::size_t c = 0; c < specs.size(); ++c) {
    ConductCell cell;
    cell.alpha = specs[c].alpha;
    cell.T = specs[c].T;
    cell.truth = specs[c].truth;
    cell.reps = design.reps;
    cell.score_mean.assign(n_cand, 0.0);
    cell.score_sd.assign(n_cand, 0.0);
    cell.cv_frequency.assign(n_cand, 0.0);
    cell.gmm_frequency.assign(n_cand, 0.0);
    int ok = 0;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto& o = outcomes[c * reps + r];
      if (!o.ok) {
        ++cell.failures;
        continue;
      }
      ++ok;
      for (std::size_t m = 0; m < n_cand; ++m) cell.score_mean[m] += o.cv_scores[m];
      cell.cv_frequency[static_cast<std::size_t>(o.cv_selected)] += 1.0;
      cell.gmm_frequency[static_cast<std::size_t>(o.gmm_selected)] += 1.0;
    }
    if (ok > 0) {
      for (std::size_t m = 0; m < n_cand; ++m) {
        cell.score_mean[m] /= ok;
        cell.cv_frequency[m] /= ok;
        cell.gmm_frequency[m] /= ok;
      }
      // Sample standard deviation (n − 1 denominator), second pass.
      for (std::size_t r = 0; r < reps; ++r) {
        const auto& o = outcomes[c * reps + r];
        if (!o.ok) continue;
        for (std::size_t m = 0; m < n_cand; ++m) {
          const double d = o.cv_scores[m] - cell.score_mean[m];
          cell.score_sd[m] += d * d;
        }
      }
      for (std::size_t m = 0; m < n_cand; ++m)
        cell.score_sd[m] = ok > 1 ? std::sqrt(cell.score_sd[m] / (ok - 1)) : 0.0;
    }
    result.cells.push_back(std::move(cell));
  }
  return result;
}

}  // namespace gmmcv
