#include "gmmcv/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <boost/random/sobol.hpp>

#include "gmmcv/errors.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Budget {
  long used = 0;
  long limit = 0;
  bool exhausted() const { return used >= limit; }
};

class Objective {
 public:
  Objective(const LeastSquaresProblem& problem, Budget& budget)
      : problem_(problem), budget_(budget) {}

  double value(const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    ++budget_.used;
    problem_.residual(x, r);
    const double f = r.squaredNorm();
    return std::isfinite(f) ? f : kInf;
  }

  double value(const Eigen::VectorXd& x) { return value(x, scratch_); }

  void jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& r, Eigen::MatrixXd& jac) {
    if (problem_.jacobian) {
      ++budget_.used;
      problem_.jacobian(x, jac);
      return;
    }
    const auto& box = problem_.box;
    jac.resize(r.size(), x.size());
    Eigen::VectorXd xp = x, rp(r.size()), rm(r.size());
    for (Index i = 0; i < x.size(); ++i) {
      const double h = 6.0554544523933395e-06 * std::max(1.0, std::abs(x(i)));
      const bool up = x(i) + h <= box.upper(i);
      const bool down = x(i) - h >= box.lower(i);
      if (up && down) {
        xp(i) = x(i) + h;
        value(xp, rp);
        xp(i) = x(i) - h;
        value(xp, rm);
        jac.col(i) = (rp - rm) / (2.0 * h);
      } else if (up) {
        xp(i) = x(i) + h;
        value(xp, rp);
        jac.col(i) = (rp - r) / h;
      } else if (down) {
        xp(i) = x(i) - h;
        value(xp, rm);
        jac.col(i) = (r - rm) / h;
      } else {
        jac.col(i).setZero();  // degenerate box coordinate
      }
      xp(i) = x(i);
    }
  }

 private:
  const LeastSquaresProblem& problem_;
  Budget& budget_;
  Eigen::VectorXd scratch_;
};

struct StartResult {
  Eigen::VectorXd x;
  double value = kInf;
  bool converged = false;
  long iterations = 0;
};

double sup_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

StartResult nelder_mead(Objective& obj, const ParamBox& box, const Eigen::VectorXd& x0,
                        const OptimizerConfig& cfg, Budget& budget) {
  const Index n = x0.size();
  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> vals(static_cast<std::size_t>(n + 1));
  for (Index i = 0; i < n; ++i) {
    auto& v = pts[static_cast<std::size_t>(i + 1)];
    const double width = box.upper(i) - box.lower(i);
    double step = 0.05 * (width > 0 ? width : std::max(1.0, std::abs(x0(i))));
    if (v(i) + step > box.upper(i)) step = -step;
    v(i) += step;
    v = box.project(v);
  }
  for (std::size_t i = 0; i < pts.size(); ++i) vals[i] = obj.value(pts[i]);

  StartResult out;
  std::vector<std::size_t> order(pts.size());
  while (!budget.exhausted()) {
    ++out.iterations;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    const auto best = order.front();
    const auto worst = order.back();
    const auto second = order[order.size() - 2];

    double spread = 0.0;
    for (const auto& pt : pts) spread = std::max(spread, sup_norm(pt - pts[best]));
    const double fspread = vals[worst] - vals[best];
    if (spread <= cfg.param_tol * (1.0 + sup_norm(pts[best])) &&
        fspread <= cfg.objective_tol * (1.0 + std::abs(vals[best]))) {
      out.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (i != worst) centroid += pts[i];
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd xr = box.project(centroid + (centroid - pts[worst]));
    const double fr = obj.value(xr);
    if (fr < vals[best]) {
      const Eigen::VectorXd xe = box.project(centroid + 2.0 * (centroid - pts[worst]));
      const double fe = obj.value(xe);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[worst] = xr;
      vals[worst] = fr;
      continue;
    }
    const bool outside = fr < vals[worst];
    const Eigen::VectorXd xc = outside ? Eigen::VectorXd(box.project(centroid + 0.5 * (xr - centroid)))
                                       : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = obj.value(xc);
    if (fc < (outside ? fr : vals[worst])) {
      pts[worst] = xc;
      vals[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i == best) continue;
      pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
      vals[i] = obj.value(pts[i]);
    }
  }
  const auto best = static_cast<std::size_t>(
      std::min_element(vals.begin(), vals.end()) - vals.begin());
  out.x = pts[best];
  out.value = vals[best];
  return out;
}

StartResult levenberg_marquardt(Objective& obj, const ParamBox& box, const Eigen::VectorXd& x0,
                                const OptimizerConfig& cfg, Budget& budget) {
  StartResult out;
  Eigen::VectorXd x = box.project(x0);
  Eigen::VectorXd r, rn;
  double f = obj.value(x, r);
  Eigen::MatrixXd jac;
  double lambda = 1e-3;
  while (!budget.exhausted()) {
    ++out.iterations;
    if (!std::isfinite(f)) break;
    if (f <= 1e-300) {
      out.converged = true;
      break;
    }
    obj.jacobian(x, r, jac);
    const Eigen::VectorXd grad = jac.transpose() * r;
    const Eigen::MatrixXd normal = jac.transpose() * jac;
    const double pg = sup_norm(x - box.project(x - grad));
    if (pg <= 1e-15 * (1.0 + f)) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd scale = normal.diagonal();
    const double floor = 1e-12 * std::max(scale.maxCoeff(), 1e-300);
    scale = scale.cwiseMax(floor);

    // Coordinates pinned at a bound with the gradient pointing outward stay
    // fixed; the damped system is solved over the free ones.
    std::vector<Index> free;
    for (Index i = 0; i < x.size(); ++i) {
      const bool at_lower = x(i) <= box.lower(i) && grad(i) > 0;
      const bool at_upper = x(i) >= box.upper(i) && grad(i) < 0;
      if (!at_lower && !at_upper) free.push_back(i);
    }
    const auto nf = static_cast<Index>(free.size());
    Eigen::MatrixXd reduced(nf, nf);
    Eigen::VectorXd reduced_grad(nf), reduced_scale(nf);
    for (Index a = 0; a < nf; ++a) {
      reduced_grad(a) = grad(free[static_cast<std::size_t>(a)]);
      reduced_scale(a) = scale(free[static_cast<std::size_t>(a)]);
      for (Index b = 0; b < nf; ++b)
        reduced(a, b) = normal(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
    }

    bool accepted = false;
    double fn = kInf;
    Eigen::VectorXd xn;
    while (!budget.exhausted()) {
      Eigen::MatrixXd a = reduced;
      a.diagonal() += lambda * reduced_scale;
      const Eigen::VectorXd reduced_step = a.ldlt().solve(-reduced_grad);
      Eigen::VectorXd step = Eigen::VectorXd::Zero(x.size());
      for (Index i = 0; i < nf; ++i) step(free[static_cast<std::size_t>(i)]) = reduced_step(i);
      xn = box.project(x + step);
      fn = obj.value(xn, rn);
      if (fn < f) {
        accepted = true;
        break;
      }
      if ((xn - x).cwiseAbs().maxCoeff() <= 1e-3 * cfg.param_tol * (1.0 + sup_norm(x)) ||
          lambda > 1e16)
        break;
      lambda *= 10.0;
    }
    if (!accepted) {
      // No descent left at this resolution: stationary if the projected
      // gradient is small relative to the objective scale.
      out.converged = pg <= 1e-8 * (1.0 + std::sqrt(f)) * (1.0 + sup_norm(x)) ||
                      f <= cfg.objective_tol * cfg.objective_tol;
      break;
    }
    const double dx = sup_norm(xn - x);
    const double df = f - fn;
    x = xn;
    r = rn;
    f = fn;
    lambda = std::max(lambda * 0.1, 1e-15);
    if (dx <= cfg.param_tol * (1.0 + sup_norm(x)) ||
        (df <= cfg.objective_tol * (1.0 + f) &&
         dx <= std::sqrt(cfg.param_tol) * (1.0 + sup_norm(x)))) {
      out.converged = true;
      break;
    }
  }
  out.x = x;
  out.value = f;
  return out;
}

// Variable projection: the flagged coordinates are solved exactly for each
// value of the others.
class AffineProfile {
 public:
  explicit AffineProfile(const LeastSquaresProblem& problem) : problem_(problem) {
    for (Index i = 0; i < problem.n_params; ++i)
      (problem.affine[static_cast<std::size_t>(i)] ? linear_ : outer_).push_back(i);
    reduced_.n_params = static_cast<Index>(outer_.size());
    reduced_.box.lower.resize(reduced_.n_params);
    reduced_.box.upper.resize(reduced_.n_params);
    for (Index a = 0; a < reduced_.n_params; ++a) {
      reduced_.box.lower(a) = problem.box.lower(outer_[static_cast<std::size_t>(a)]);
      reduced_.box.upper(a) = problem.box.upper(outer_[static_cast<std::size_t>(a)]);
    }
    reduced_.residual = [this](const Eigen::VectorXd& u, Eigen::VectorXd& r) {
      Eigen::VectorXd x;
      solve(u, x, r);
    };
  }

  AffineProfile(const AffineProfile&) = delete;
  AffineProfile& operator=(const AffineProfile&) = delete;

  const LeastSquaresProblem& reduced() const { return reduced_; }

  Eigen::VectorXd restrict(const Eigen::VectorXd& x) const {
    Eigen::VectorXd u(reduced_.n_params);
    for (Index a = 0; a < u.size(); ++a) u(a) = x(outer_[static_cast<std::size_t>(a)]);
    return u;
  }

  /// Full point and residual with the affine block at its box-clamped
  /// least-squares solution.
  void solve(const Eigen::VectorXd& u, Eigen::VectorXd& x, Eigen::VectorXd& r) const {
    x = Eigen::VectorXd::Zero(problem_.n_params);
    for (Index a = 0; a < u.size(); ++a) x(outer_[static_cast<std::size_t>(a)]) = u(a);
    Eigen::VectorXd r0;
    problem_.residual(x, r0);
    const auto nl = static_cast<Index>(linear_.size());
    Eigen::MatrixXd jl(r0.size(), nl);
    if (problem_.jacobian) {
      Eigen::MatrixXd jac;
      problem_.jacobian(x, jac);
      for (Index b = 0; b < nl; ++b) jl.col(b) = jac.col(linear_[static_cast<std::size_t>(b)]);
    } else {
      Eigen::VectorXd ri;
      for (Index b = 0; b < nl; ++b) {
        const Index i = linear_[static_cast<std::size_t>(b)];
        x(i) = 1.0;
        problem_.residual(x, ri);
        jl.col(b) = ri - r0;
        x(i) = 0.0;
      }
    }
    Eigen::VectorXd coef = jl.completeOrthogonalDecomposition().solve(-r0);
    for (Index b = 0; b < nl; ++b) {
      const Index i = linear_[static_cast<std::size_t>(b)];
      x(i) = std::clamp(coef(b), problem_.box.lower(i), problem_.box.upper(i));
      coef(b) = x(i);
    }
    r = r0 + jl * coef;
  }

 private:
  const LeastSquaresProblem& problem_;
  std::vector<Index> linear_, outer_;
  LeastSquaresProblem reduced_;
};

}  // namespace

void validate_optimizer_config(const OptimizerConfig& c) {
  if (c.starts < 1) throw ConfigurationError("optimizer.starts must be at least 1");
  if (!c.simplex && !c.polish)
    throw ConfigurationError("optimizer needs the simplex stage, the polish stage, or both");
  if (c.max_evaluations < 1) throw ConfigurationError("optimizer.max_evaluations must be positive");
  if (!(c.param_tol > 0) || !(c.objective_tol > 0))
    throw ConfigurationError("optimizer tolerances must be positive");
}

std::vector<Eigen::VectorXd> multistart_points(const ParamBox& box, int count,
                                               std::uint64_t seed) {
  std::vector<Eigen::VectorXd> pts;
  if (count < 1) return pts;
  pts.push_back(box.center());
  if (count == 1) return pts;
  const Index p = box.size();
  boost::random::sobol sobol(static_cast<std::size_t>(p));
  RandomStream rng(seed, 0x534f424f4cull);
  Eigen::VectorXd shift(p);
  for (Index i = 0; i < p; ++i) shift(i) = rng.uniform();
  const double denom = std::ldexp(1.0, 64);
  for (int k = 1; k < count; ++k) {
    Eigen::VectorXd x(p);
    for (Index i = 0; i < p; ++i) {
      double u = static_cast<double>(sobol()) / denom + shift(i);
      u -= std::floor(u);
      x(i) = box.lower(i) + u * (box.upper(i) - box.lower(i));
    }
    pts.push_back(box.project(x));
  }
  return pts;
}

OptimizerResult minimize_least_squares(const LeastSquaresProblem& problem,
                                       const OptimizerConfig& config) {
  validate_optimizer_config(config);
  if (problem.box.size() != problem.n_params)
    throw ConfigurationError("parameter box dimension differs from the parameter count");
  if (!problem.box.bounded()) throw ConfigurationError("parameter box must be bounded");

  OptimizerResult result;
  result.value = kInf;
  Eigen::VectorXd best_any = problem.box.center();
  double best_any_value = kInf;
  const auto starts = multistart_points(problem.box, config.starts, config.seed);
  if (!problem.affine.empty() && static_cast<Index>(problem.affine.size()) != problem.n_params)
    throw ConfigurationError("affine flags must be empty or one per parameter");
  std::optional<AffineProfile> profile;
  if (std::find(problem.affine.begin(), problem.affine.end(), true) != problem.affine.end())
    profile.emplace(problem);

  for (std::size_t s = 0; s < starts.size(); ++s) {
    // With both stages the simplex gets three quarters of the budget.
    Budget budget{0, config.simplex && config.polish ? config.max_evaluations * 3L / 4
                                                     : static_cast<long>(config.max_evaluations)};
    Objective obj(problem, budget);
    StartResult run;
    try {
      Eigen::VectorXd start = starts[s];
      if (profile) {
        // The profiled search shares this start's budget with the joint
        // stages that follow.
        const LeastSquaresProblem& reduced = profile->reduced();
        Eigen::VectorXd u = profile->restrict(start);
        if (reduced.n_params > 0) {
          Objective robj(reduced, budget);
          // Gauss-Newton converges slowly on the profiled residual when the
          // fit is poor, so the reduced search is always a simplex.
          u = nelder_mead(robj, reduced.box, u, config, budget).x;
        }
        Eigen::VectorXd r;
        profile->solve(u, start, r);
      }
      if (config.simplex) run = nelder_mead(obj, problem.box, start, config, budget);
      if (config.polish) {
        const Eigen::VectorXd from = config.simplex ? run.x : start;
        const bool simplex_converged = run.converged;
        budget.limit = config.max_evaluations;
        StartResult lm = levenberg_marquardt(obj, problem.box, from, config, budget);
        lm.iterations += run.iterations;
        if (!config.simplex || lm.value <= run.value) {
          lm.converged = lm.converged || (simplex_converged && config.simplex);
          run = lm;
        }
      }
    } catch (const std::exception&) {
      run = StartResult{};  // a throwing start counts as not converged
    }
    ++result.trace.starts_run;
    result.trace.evaluations += budget.used;
    result.trace.iterations += run.iterations;
    result.trace.start_values.push_back(run.x.size() ? run.value
                                                     : std::numeric_limits<double>::quiet_NaN());
    if (run.x.size() && run.value < best_any_value) {
      best_any_value = run.value;
      best_any = run.x;
    }
    if (!run.converged) continue;
    ++result.trace.converged_starts;
    if (run.value < result.value) {
      result.value = run.value;
      result.x = run.x;
      result.trace.best_start = static_cast<int>(s);
    }
  }
  if (result.trace.converged_starts == 0)
    throw EstimationError("optimizer did not converge from any of " +
                              std::to_string(result.trace.starts_run) + " starts",
                          best_any, best_any_value);
  result.trace.message = "converged";
  return result;
}

}  // namespace gmmcv
