#include "gmmcv/mpec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include "gmmcv/errors.hpp"
#include "gmmcv/parallel.hpp"

namespace gmmcv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMaxPenalty = 1e12;

std::string who(const ConstrainedModel& m) {
  return m.name.empty() ? "constrained model" : "constrained model '" + m.name + "'";
}

double fd_step(double x) { return 6e-6 * std::max(1.0, std::abs(x)); }

// η is kept flat, observation-major; callers see it as n × e.
Eigen::MatrixXd unflatten(const Eigen::VectorXd& eta, Index n, Index e) {
  Eigen::MatrixXd out(n, e);
  for (Index t = 0; t < n; ++t) out.row(t) = eta.segment(t * e, e).transpose();
  return out;
}

// Unknowns: u = [θ; σ] (a entries) and η stored row-major as n·e entries.
class AlProblem {
 public:
  AlProblem(const ConstrainedModel& model, const Dataset& data, const Eigen::MatrixXd& w,
            std::vector<bool> frozen)
      : m_(model),
        data_(data),
        root_(weight_root(w)),
        n_(data.size()),
        p_(model.theta_dim),
        s_(model.sigma_dim),
        a_(p_ + s_),
        e_(model.eta_per_obs),
        mo_(model.obs_constraints),
        m0_(model.shared_constraints),
        frozen_(std::move(frozen)) {
    lower_ = Eigen::VectorXd::Constant(a_, -kInf);
    upper_ = Eigen::VectorXd::Constant(a_, kInf);
    lower_.head(p_) = model.theta_box.lower;
    upper_.head(p_) = model.theta_box.upper;
    if (model.sigma_box.size() == s_ && s_ > 0) {
      lower_.tail(s_) = model.sigma_box.lower;
      upper_.tail(s_) = model.sigma_box.upper;
    }
    lam_t_ = Eigen::VectorXd::Zero(n_ * mo_);
    lam0_ = Eigen::VectorXd::Zero(m0_);
  }

  Index n() const { return n_; }
  Index eta_size() const { return n_ * e_; }
  const Eigen::VectorXd& lower() const { return lower_; }
  const Eigen::VectorXd& upper() const { return upper_; }

  Eigen::VectorXd theta(const Eigen::VectorXd& u) const { return u.head(p_); }
  Eigen::VectorXd sigma(const Eigen::VectorXd& u) const { return u.tail(s_); }
  Eigen::MatrixXd eta_matrix(const Eigen::VectorXd& eta) const { return unflatten(eta, n_, e_); }

  struct Values {
    Eigen::VectorXd gbar;  // q
    Eigen::VectorXd h;     // n·m
    Eigen::VectorXd h0;    // m0
  };

  Values values(const Eigen::VectorXd& u, const Eigen::VectorXd& eta) const {
    const Eigen::VectorXd th = theta(u), sg = sigma(u);
    Values v{Eigen::VectorXd::Zero(m_.q), Eigen::VectorXd(n_ * mo_), Eigen::VectorXd(m0_)};
    Eigen::VectorXd f(m_.q);
    for (Index t = 0; t < n_; ++t) {
      const auto et = eta.segment(t * e_, e_);
      m_.moment(data_.row(t), th, sg, et, f);
      v.gbar += f;
      if (mo_ > 0) {
        Eigen::VectorXd ht(mo_);
        m_.obs_constraint(data_.row(t), th, sg, et, ht);
        v.h.segment(t * mo_, mo_) = ht;
      }
    }
    v.gbar /= static_cast<double>(n_);
    if (m0_ > 0) m_.shared_constraint(data_, th, sg, eta_matrix(eta), v.h0);
    return v;
  }

  double objective(const Values& v) const {
    return std::max(0.0, (root_ * v.gbar).squaredNorm());
  }

  double violation(const Values& v) const {
    double out = 0.0;
    if (v.h.size()) out = std::max(out, v.h.cwiseAbs().maxCoeff());
    if (v.h0.size()) out = std::max(out, v.h0.cwiseAbs().maxCoeff());
    return out;
  }

  // |R|² with R = [L'ḡ; c(h + λ/ρ); c(h₀ + λ₀/ρ)], c = √(ρ/2).
  double merit(const Values& v) const {
    double out = objective(v);
    if (mo_ > 0) out += 0.5 * rho_ * (v.h + lam_t_ / rho_).squaredNorm();
    if (m0_ > 0) out += 0.5 * rho_ * (v.h0 + lam0_ / rho_).squaredNorm();
    return out;
  }

  struct Linear {
    Eigen::MatrixXd Gu;    // g × a, rows [L'A; c·A0]
    Eigen::MatrixXd Geta;  // g × n·e
    Eigen::VectorXd RG;    // g
    Eigen::MatrixXd C;     // n·m × a
    Eigen::MatrixXd E;     // n·m × e
    Eigen::VectorXd Rt;    // n·m
  };

  Linear linearize(const Eigen::VectorXd& u, const Eigen::VectorXd& eta, const Values& v) const {
    const Eigen::VectorXd th = theta(u), sg = sigma(u);
    const double inv_n = 1.0 / static_cast<double>(n_);
    const double c = std::sqrt(0.5 * rho_);
    const Index cols = a_ + e_;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m_.q, a_);
    Eigen::MatrixXd B(m_.q, n_ * e_);
    Linear lin;
    lin.C.resize(n_ * mo_, a_);
    lin.E.resize(n_ * mo_, e_);
    Eigen::MatrixXd jf(m_.q, cols), jh(mo_, cols);
    for (Index t = 0; t < n_; ++t) {
      const Eigen::VectorXd et = eta.segment(t * e_, e_);
      obs_jacobian(m_.moment, m_.moment_jacobian, m_.q, t, th, sg, et, jf);
      A += jf.leftCols(a_) * inv_n;
      B.middleCols(t * e_, e_) = jf.rightCols(e_) * inv_n;
      if (mo_ > 0) {
        obs_jacobian(m_.obs_constraint, m_.obs_constraint_jacobian, mo_, t, th, sg, et, jh);
        lin.C.middleRows(t * mo_, mo_) = c * jh.leftCols(a_);
        lin.E.middleRows(t * mo_, mo_) = c * jh.rightCols(e_);
      }
    }
    const Index r = root_.rows();
    lin.Gu.resize(r + m0_, a_);
    lin.Geta.resize(r + m0_, n_ * e_);
    lin.RG.resize(r + m0_);
    lin.Gu.topRows(r) = root_ * A;
    lin.Geta.topRows(r) = root_ * B;
    lin.RG.head(r) = root_ * v.gbar;
    if (m0_ > 0) {
      shared_jacobian(u, eta, lin.Gu.bottomRows(m0_), lin.Geta.bottomRows(m0_));
      lin.Gu.bottomRows(m0_) *= c;
      lin.Geta.bottomRows(m0_) *= c;
      lin.RG.tail(m0_) = c * (v.h0 + lam0_ / rho_);
    }
    lin.Rt = mo_ > 0 ? Eigen::VectorXd(c * (v.h + lam_t_ / rho_)) : Eigen::VectorXd();
    return lin;
  }

  // J'R split into the u and η blocks.
  void gradient(const Linear& lin, Eigen::VectorXd& gu, Eigen::VectorXd& geta) const {
    gu = lin.Gu.transpose() * lin.RG;
    geta = lin.Geta.transpose() * lin.RG;
    if (mo_ > 0) {
      gu += lin.C.transpose() * lin.Rt;
      for (Index t = 0; t < n_; ++t)
        geta.segment(t * e_, e_) +=
            lin.E.middleRows(t * mo_, mo_).transpose() * lin.Rt.segment(t * mo_, mo_);
    }
  }

  // sup-norm of the projected gradient of |R|², which at the updated
  // multipliers is the gradient of the Lagrangian.
  double projected_gradient(const Eigen::VectorXd& u, const Eigen::VectorXd& gu,
                            const Eigen::VectorXd& geta) const {
    double out = geta.size() ? 2.0 * geta.cwiseAbs().maxCoeff() : 0.0;
    for (Index i = 0; i < a_; ++i) {
      if (frozen_[static_cast<std::size_t>(i)]) continue;
      const double moved = std::clamp(u(i) - 2.0 * gu(i), lower_(i), upper_(i));
      out = std::max(out, std::abs(u(i) - moved));
    }
    return out;
  }

  // Damped Gauss-Newton step for the free u coordinates and all of η. The η
  // block is block diagonal plus a rank-g term, inverted by Woodbury; u is
  // eliminated through its Schur complement.
  bool step(const Linear& lin, const Eigen::VectorXd& gu, const Eigen::VectorXd& geta,
            const std::vector<Index>& free, const Eigen::VectorXd& du_scale,
            const Eigen::VectorXd& deta_scale, double mu, Eigen::VectorXd& du,
            Eigen::VectorXd& deta) const {
    const Index g = lin.Geta.rows();
    const Index f = static_cast<Index>(free.size());
    const Index ne = n_ * e_;

    std::vector<Eigen::LLT<Eigen::MatrixXd>> blocks(static_cast<std::size_t>(n_));
    for (Index t = 0; t < n_ && e_ > 0; ++t) {
      Eigen::MatrixXd d = Eigen::MatrixXd::Zero(e_, e_);
      if (mo_ > 0) {
        const auto et = lin.E.middleRows(t * mo_, mo_);
        d.noalias() += et.transpose() * et;
      }
      d.diagonal() += mu * deta_scale.segment(t * e_, e_);
      blocks[static_cast<std::size_t>(t)].compute(d);
      if (blocks[static_cast<std::size_t>(t)].info() != Eigen::Success) return false;
    }
    auto block_solve = [&](const Eigen::MatrixXd& rhs) {
      Eigen::MatrixXd out(rhs.rows(), rhs.cols());
      for (Index t = 0; t < n_; ++t)
        out.middleRows(t * e_, e_) =
            blocks[static_cast<std::size_t>(t)].solve(rhs.middleRows(t * e_, e_));
      return out;
    };

    const Eigen::MatrixXd Y = block_solve(lin.Geta.transpose());  // ne × g
    Eigen::MatrixXd K = Eigen::MatrixXd::Identity(g, g);
    K.noalias() += lin.Geta * Y;
    const Eigen::LDLT<Eigen::MatrixXd> k_ldlt(K);
    if (k_ldlt.info() != Eigen::Success) return false;
    auto h_solve = [&](const Eigen::MatrixXd& rhs) {
      Eigen::MatrixXd out = block_solve(rhs);
      out -= Y * k_ldlt.solve(Y.transpose() * rhs);
      return out;
    };

    Eigen::MatrixXd Gf(g, f), Cf(n_ * mo_, f);
    Eigen::VectorXd bu(f), su(f);
    for (Index j = 0; j < f; ++j) {
      const Index i = free[static_cast<std::size_t>(j)];
      Gf.col(j) = lin.Gu.col(i);
      if (mo_ > 0) Cf.col(j) = lin.C.col(i);
      bu(j) = -gu(i);
      su(j) = du_scale(i);
    }
    Eigen::MatrixXd Hue(ne, f);  // H_ηu restricted to the free columns
    Hue.noalias() = lin.Geta.transpose() * Gf;
    if (mo_ > 0) {
      for (Index t = 0; t < n_; ++t)
        Hue.middleRows(t * e_, e_).noalias() +=
            lin.E.middleRows(t * mo_, mo_).transpose() * Cf.middleRows(t * mo_, mo_);
    }
    Eigen::MatrixXd Huu = Gf.transpose() * Gf;
    if (mo_ > 0) Huu.noalias() += Cf.transpose() * Cf;
    Huu.diagonal() += mu * su;

    const Eigen::VectorXd beta = -geta;
    const Eigen::VectorXd xb = ne ? Eigen::VectorXd(h_solve(beta)) : Eigen::VectorXd();
    Eigen::VectorXd dfree(f);
    Eigen::MatrixXd X;
    if (f > 0) {
      X = ne ? h_solve(Hue) : Eigen::MatrixXd(0, f);
      Eigen::MatrixXd S = Huu;
      Eigen::VectorXd rhs = bu;
      if (ne) {
        S.noalias() -= Hue.transpose() * X;
        rhs.noalias() -= Hue.transpose() * xb;
      }
      const Eigen::LDLT<Eigen::MatrixXd> s_ldlt(0.5 * (S + S.transpose()));
      if (s_ldlt.info() != Eigen::Success) return false;
      dfree = s_ldlt.solve(rhs);
    }
    du = Eigen::VectorXd::Zero(a_);
    for (Index j = 0; j < f; ++j) du(free[static_cast<std::size_t>(j)]) = dfree(j);
    deta = xb;
    if (f > 0 && ne) deta.noalias() -= X * dfree;
    return du.allFinite() && deta.allFinite();
  }

  struct InnerResult {
    double kkt = kInf;
    long iterations = 0;
  };

  InnerResult inner(Eigen::VectorXd& u, Eigen::VectorXd& eta, int max_iter, double tol) const {
    InnerResult res;
    Values v = values(u, eta);
    double F = merit(v);
    double mu = 1e-3, nu = 2.0;
    Eigen::VectorXd gu, geta, du, deta;
    for (int it = 0; it < max_iter; ++it) {
      const Linear lin = linearize(u, eta, v);
      gradient(lin, gu, geta);
      res.kkt = projected_gradient(u, gu, geta);
      if (res.kkt <= tol) break;

      // Marquardt scaling from the column norms of the Jacobian.
      Eigen::VectorXd su = lin.Gu.colwise().squaredNorm().transpose();
      if (mo_ > 0) su += lin.C.colwise().squaredNorm().transpose();
      Eigen::VectorXd se = lin.Geta.colwise().squaredNorm().transpose();
      if (mo_ > 0) {
        for (Index t = 0; t < n_; ++t)
          se.segment(t * e_, e_) +=
              lin.E.middleRows(t * mo_, mo_).colwise().squaredNorm().transpose();
      }
      double top = 0.0;
      if (su.size()) top = std::max(top, su.maxCoeff());
      if (se.size()) top = std::max(top, se.maxCoeff());
      const double floor = std::max(1e-10 * top, 1e-300);
      su = su.cwiseMax(floor);
      se = se.cwiseMax(floor);

      std::vector<Index> free;
      for (Index i = 0; i < a_; ++i) {
        if (frozen_[static_cast<std::size_t>(i)]) continue;
        if (u(i) <= lower_(i) && gu(i) > 0) continue;
        if (u(i) >= upper_(i) && gu(i) < 0) continue;
        free.push_back(i);
      }

      bool accepted = false;
      bool negligible = false;
      while (mu < 1e20) {
        ++res.iterations;
        if (!step(lin, gu, geta, free, su, se, mu, du, deta)) {
          mu *= nu;
          nu *= 2.0;
          continue;
        }
        const Eigen::VectorXd u_new = (u + du).cwiseMax(lower_).cwiseMin(upper_);
        const Eigen::VectorXd eta_new = eta + deta;
        const double size = (u_new - u).cwiseAbs().sum() + deta.cwiseAbs().sum();
        const double scale = u.cwiseAbs().sum() + eta.cwiseAbs().sum();
        const Values v_new = values(u_new, eta_new);
        const double F_new = merit(v_new);
        if (std::isfinite(F_new) && F_new < F) {
          double predicted = -(du.dot(gu) + deta.dot(geta));
          predicted += mu * (du.cwiseProduct(du).dot(su) + deta.cwiseProduct(deta).dot(se));
          const double gain = predicted > 0 ? (F - F_new) / predicted : 0.0;
          mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * gain - 1.0, 3));
          nu = 2.0;
          negligible = F - F_new <= 1e-15 * F || size <= 1e-15 * (scale + 1e-15);
          u = u_new;
          eta = eta_new;
          v = v_new;
          F = F_new;
          accepted = true;
          break;
        }
        if (size <= 1e-15 * (scale + 1e-15)) break;
        mu *= nu;
        nu *= 2.0;
      }
      if (!accepted || negligible) {
        const Linear last = linearize(u, eta, v);
        gradient(last, gu, geta);
        res.kkt = projected_gradient(u, gu, geta);
        break;
      }
    }
    return res;
  }

  void update_multipliers(const Values& v) {
    if (mo_ > 0) lam_t_ += rho_ * v.h;
    if (m0_ > 0) lam0_ += rho_ * v.h0;
  }
  double rho() const { return rho_; }
  void set_rho(double r) { rho_ = r; }

  // Per-observation solve of h_t(θ, σ, η_t) = 0 for η_t at fixed (θ, σ).
  // Used for the warm start and to snap the final η onto the constraints.
  void solve_observations(const Eigen::VectorXd& u, Eigen::VectorXd& eta, int iterations) const {
    if (mo_ == 0 || e_ == 0) return;
    const Eigen::VectorXd th = theta(u), sg = sigma(u);
    Eigen::VectorXd h(mo_);
    Eigen::MatrixXd jh(mo_, a_ + e_);
    for (Index t = 0; t < n_; ++t) {
      Eigen::VectorXd et = eta.segment(t * e_, e_);
      newton(t, th, sg, et, h, jh, iterations);
      // A stationary start (e.g. η = 0 for η² = y) stalls; retry from ones.
      if (!(h.cwiseAbs().maxCoeff() <= 1e-12) && et.isZero(0.0)) {
        Eigen::VectorXd alt = Eigen::VectorXd::Ones(e_);
        Eigen::VectorXd alt_h(mo_);
        newton(t, th, sg, alt, alt_h, jh, iterations);
        if (alt_h.allFinite() && !(alt_h.squaredNorm() >= h.squaredNorm())) et = alt;
      }
      eta.segment(t * e_, e_) = et;
    }
  }

 private:
  void newton(Index t, const Eigen::VectorXd& th, const Eigen::VectorXd& sg, Eigen::VectorXd& et,
              Eigen::VectorXd& h, Eigen::MatrixXd& jh, int iterations) const {
    Eigen::VectorXd trial_h(mo_);
    m_.obs_constraint(data_.row(t), th, sg, et, h);
    for (int it = 0; it < iterations && h.allFinite() && h.cwiseAbs().maxCoeff() > 0; ++it) {
      obs_jacobian(m_.obs_constraint, m_.obs_constraint_jacobian, mo_, t, th, sg, et, jh);
      const Eigen::VectorXd dir =
          -jh.rightCols(e_).completeOrthogonalDecomposition().solve(h);
      if (!dir.allFinite()) break;
      bool improved = false;
      for (double lambda = 1.0; lambda > 1e-10; lambda *= 0.5) {
        const Eigen::VectorXd trial = et + lambda * dir;
        m_.obs_constraint(data_.row(t), th, sg, trial, trial_h);
        if (trial_h.allFinite() && trial_h.squaredNorm() < h.squaredNorm()) {
          et = trial;
          h = trial_h;
          improved = true;
          break;
        }
      }
      if (!improved) break;
    }
  }

  void obs_jacobian(const ObsFn& fn, const ObsJacobianFn& jac, Index rows, Index t,
                    const Eigen::VectorXd& th, const Eigen::VectorXd& sg,
                    const Eigen::VectorXd& et, Eigen::MatrixXd& out) const {
    const auto v = data_.row(t);
    if (jac) {
      jac(v, th, sg, et, out);
      return;
    }
    Eigen::VectorXd hi(rows), lo(rows);
    Eigen::VectorXd th2 = th, sg2 = sg, et2 = et;
    for (Index i = 0; i < a_ + e_; ++i) {
      double& x = i < p_ ? th2(i) : i < a_ ? sg2(i - p_) : et2(i - a_);
      const double x0 = x, h = fd_step(x0);
      x = x0 + h;
      fn(v, th2, sg2, et2, hi);
      x = x0 - h;
      fn(v, th2, sg2, et2, lo);
      x = x0;
      out.col(i) = (hi - lo) / (2.0 * h);
    }
  }

  void shared_jacobian(const Eigen::VectorXd& u, const Eigen::VectorXd& eta,
                       Eigen::Ref<Eigen::MatrixXd> du, Eigen::Ref<Eigen::MatrixXd> deta) const {
    Eigen::VectorXd hi(m0_), lo(m0_);
    Eigen::VectorXd th = theta(u), sg = sigma(u);
    Eigen::MatrixXd em = eta_matrix(eta);
    for (Index i = 0; i < a_; ++i) {
      double& x = i < p_ ? th(i) : sg(i - p_);
      const double x0 = x, h = fd_step(x0);
      x = x0 + h;
      m_.shared_constraint(data_, th, sg, em, hi);
      x = x0 - h;
      m_.shared_constraint(data_, th, sg, em, lo);
      x = x0;
      du.col(i) = (hi - lo) / (2.0 * h);
    }
    for (Index t = 0; t < n_; ++t) {
      for (Index j = 0; j < e_; ++j) {
        double& x = em(t, j);
        const double x0 = x, h = fd_step(x0);
        x = x0 + h;
        m_.shared_constraint(data_, th, sg, em, hi);
        x = x0 - h;
        m_.shared_constraint(data_, th, sg, em, lo);
        x = x0;
        deta.col(t * e_ + j) = (hi - lo) / (2.0 * h);
      }
    }
  }

  const ConstrainedModel& m_;
  const Dataset& data_;
  Eigen::MatrixXd root_;
  Index n_, p_, s_, a_, e_, mo_, m0_;
  std::vector<bool> frozen_;
  Eigen::VectorXd lower_, upper_;
  Eigen::VectorXd lam_t_, lam0_;
  double rho_ = 1.0;
};

struct AlOutcome {
  Eigen::VectorXd u;
  Eigen::VectorXd eta;
  double objective = 0.0;
  double violation = 0.0;
  double kkt = kInf;
  int outer = 0;
  long inner = 0;
  double rho = 0.0;
  bool feasible = false;
  bool stationary = false;
};

AlOutcome augmented_lagrangian(const ConstrainedModel& model, const Dataset& data,
                               const Eigen::MatrixXd& w, const Eigen::VectorXd& u0,
                               const std::vector<bool>& frozen, const MpecOptions& opt) {
  AlProblem prob(model, data, w, frozen);
  prob.set_rho(opt.initial_penalty);
  AlOutcome out;
  out.u = u0.cwiseMax(prob.lower()).cwiseMin(prob.upper());
  out.eta = Eigen::VectorXd::Zero(prob.eta_size());
  prob.solve_observations(out.u, out.eta, 50);

  // Inner solves run well past the reported tolerance; the extra iterations
  // are cheap near the solution and keep θ accurate to the multiplier error.
  const double inner_tol = 1e-4 * opt.kkt_tol;
  const bool snap = model.shared_constraints == 0 && model.obs_constraints == model.eta_per_obs &&
                    model.obs_constraints > 0;
  double previous = kInf;
  for (int outer = 1; outer <= opt.max_outer; ++outer) {
    const auto inner = prob.inner(out.u, out.eta, opt.max_inner, inner_tol);
    out.outer = outer;
    out.inner += inner.iterations;
    out.kkt = inner.kkt;
    const auto v = prob.values(out.u, out.eta);
    out.violation = prob.violation(v);
    prob.update_multipliers(v);
    out.rho = prob.rho();
    const bool ok = out.violation <= opt.feasibility_tol && out.kkt <= opt.kkt_tol;
    const bool slow = out.violation > 0.25 * previous;
    // Past the tolerance, keep going while the violation still shrinks fast;
    // θ tracks the multiplier error.
    if (ok && (out.violation <= 1e-3 * opt.feasibility_tol || slow)) break;
    if (!model.has_constraints() && out.kkt <= opt.kkt_tol) break;
    if (slow) prob.set_rho(std::min(prob.rho() * opt.penalty_growth, kMaxPenalty));
    previous = out.violation;
  }
  if (snap && out.violation <= opt.feasibility_tol) prob.solve_observations(out.u, out.eta, 3);
  const auto v = prob.values(out.u, out.eta);
  out.violation = prob.violation(v);
  out.objective = prob.objective(v);
  out.feasible = out.violation <= opt.feasibility_tol;
  out.stationary = out.kkt <= opt.kkt_tol;
  return out;
}

Eigen::VectorXd sigma_start(const ConstrainedModel& model) {
  if (model.sigma_dim == 0) return {};
  if (model.sigma_box.size() != model.sigma_dim) return Eigen::VectorXd::Zero(model.sigma_dim);
  Eigen::VectorXd out(model.sigma_dim);
  for (Index i = 0; i < model.sigma_dim; ++i) {
    const double lo = model.sigma_box.lower(i), hi = model.sigma_box.upper(i);
    out(i) = std::isfinite(lo) && std::isfinite(hi) ? 0.5 * (lo + hi) : std::clamp(0.0, lo, hi);
  }
  return out;
}

Eigen::VectorXd join(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() + b.size());
  out << a, b;
  return out;
}

std::string number(double x) {
  std::ostringstream os;
  os.precision(3);
  os << x;
  return os.str();
}

bool reducible(const ConstrainedModel& model) {
  return !model.has_constraints() && model.eta_per_obs == 0 &&
         (model.sigma_dim == 0 || model.sigma_box.bounded());
}

// The same model as a plain MomentModel over [θ; σ].
MomentModel reduced_model(const ConstrainedModel& model) {
  MomentModel out;
  out.name = model.name;
  const Index p = model.theta_dim, s = model.sigma_dim;
  out.p = p + s;
  out.q = model.q;
  out.instrument_count = model.instrument_count;
  out.under_identified = out.q < out.p;
  out.box.lower = join(model.theta_box.lower, s ? model.sigma_box.lower : Eigen::VectorXd());
  out.box.upper = join(model.theta_box.upper, s ? model.sigma_box.upper : Eigen::VectorXd());
  out.instruments = model.instruments;
  const Eigen::VectorXd empty;
  out.moment = [fn = model.moment, p, s, empty](const ObsRef& v, const Eigen::VectorXd& x,
                                               VecRef r) {
    fn(v, x.head(p), x.tail(s), empty, r);
  };
  if (model.moment_jacobian) {
    out.jacobian = [fn = model.moment_jacobian, p, s, empty](
                       const ObsRef& v, const Eigen::VectorXd& x, MatRef j) {
      fn(v, x.head(p), x.tail(s), empty, j);
    };
  }
  return out;
}

}  // namespace

void validate_constrained_model(const ConstrainedModel& model) {
  const std::string w = who(model);
  if (model.theta_dim < 0 || model.sigma_dim < 0 || model.eta_per_obs < 0 ||
      model.obs_constraints < 0 || model.shared_constraints < 0)
    throw ConfigurationError(w + ": dimensions must be nonnegative");
  if (model.theta_dim + model.sigma_dim < 1)
    throw ConfigurationError(w + ": needs at least one θ or σ coordinate");
  if (model.q < 1) throw ConfigurationError(w + ": q must be positive");
  if (model.theta_box.lower.size() != model.theta_dim ||
      model.theta_box.upper.size() != model.theta_dim)
    throw ConfigurationError(w + ": θ box dimension differs from theta_dim");
  if (model.theta_dim > 0 && !model.theta_box.bounded())
    throw ConfigurationError(w + ": θ box must be finite");
  if (((model.theta_box.upper - model.theta_box.lower).array() < 0).any())
    throw ConfigurationError(w + ": θ box has upper < lower");
  if (model.sigma_box.size() != 0 &&
      (model.sigma_box.size() != model.sigma_dim || model.sigma_box.upper.size() != model.sigma_dim))
    throw ConfigurationError(w + ": σ box must be empty or have sigma_dim entries");
  if (model.sigma_box.size() != 0 &&
      ((model.sigma_box.upper - model.sigma_box.lower).array() < 0).any())
    throw ConfigurationError(w + ": σ box has upper < lower");
  if (!model.moment) throw ConfigurationError(w + ": missing moment function");
  if (model.obs_constraints > 0 && !model.obs_constraint)
    throw ConfigurationError(w + ": obs_constraints > 0 but no constraint function");
  if (model.shared_constraints > 0 && !model.shared_constraint)
    throw ConfigurationError(w + ": shared_constraints > 0 but no constraint function");
  const auto& ins = model.instruments;
  if (ins.available() && ins.equations * ins.cols != model.q)
    throw ConfigurationError(w + ": q must equal equations x instrument columns");
}

void validate_mpec_options(const MpecOptions& o) {
  if (!(o.initial_penalty > 0)) throw ConfigurationError("mpec: initial_penalty must be positive");
  if (!(o.penalty_growth > 1)) throw ConfigurationError("mpec: penalty_growth must exceed 1");
  if (o.max_outer < 1) throw ConfigurationError("mpec: max_outer must be at least 1");
  if (o.max_inner < 1) throw ConfigurationError("mpec: max_inner must be at least 1");
  if (!(o.feasibility_tol > 0)) throw ConfigurationError("mpec: feasibility_tol must be positive");
  if (!(o.kkt_tol > 0)) throw ConfigurationError("mpec: kkt_tol must be positive");
  validate_optimizer_config(o.optimizer);
}

ConstrainedEstimate estimate_mpec(const ConstrainedModel& model, const Dataset& data,
                                  const ResolvedWeighting& w, const MpecOptions& options) {
  validate_constrained_model(model);
  validate_mpec_options(options);
  check_weight_matrix(w.matrix, model.q);
  const Index p = model.theta_dim, s = model.sigma_dim;

  ConstrainedEstimate out;
  out.weighting = w.matrix;
  if (reducible(model)) {
    const MomentModel plain = reduced_model(model);
    GmmEstimate est = estimate(plain, data, w, options.optimizer);
    out.theta = est.theta.head(p);
    out.sigma = est.theta.tail(s);
    out.eta = Eigen::MatrixXd(data.size(), 0);
    out.objective = est.objective;
    const Eigen::VectorXd grad =
        2.0 * mean_moment_jacobian(plain, data, est.theta).transpose() * w.matrix *
        mean_moment(plain, data, est.theta);
    const Eigen::VectorXd moved = plain.box.project(est.theta - grad);
    out.kkt = (est.theta - moved).cwiseAbs().maxCoeff();
    out.inner_iterations = est.trace.iterations;
    out.message = "no constraints or η: solved as a plain moment model";
    return out;
  }

  const Eigen::VectorXd u0 = join(model.theta_box.center(), sigma_start(model));
  const AlOutcome al = augmented_lagrangian(model, data, w.matrix, u0,
                                            std::vector<bool>(static_cast<std::size_t>(p + s)),
                                            options);
  out.theta = al.u.head(p);
  out.sigma = al.u.tail(s);
  out.eta = unflatten(al.eta, data.size(), model.eta_per_obs);
  out.objective = al.objective;
  out.feasibility = al.violation;
  out.kkt = al.kkt;
  out.outer_iterations = al.outer;
  out.inner_iterations = al.inner;
  out.penalty = al.rho;
  if (!al.feasible) {
    throw EstimationError(who(model) + ": constraints not met, max violation " +
                              number(al.violation) + " after " + std::to_string(al.outer) +
                              " outer iterations",
                          join(al.u, al.eta), al.objective);
  }
  if (!al.stationary) {
    throw EstimationError(who(model) + ": solver stalled with KKT residual " + number(al.kkt),
                          join(al.u, al.eta), al.objective);
  }
  out.message = "converged";
  return out;
}

ConstrainedEstimate estimate_mpec(const ConstrainedModel& model, const Dataset& data,
                                  const WeightingSpec& w, const MpecOptions& options) {
  validate_constrained_model(model);
  return estimate_mpec(model, data, resolve_weighting(w, model.q, model.instruments, data),
                       options);
}

MpecValidation validate_mpec(const ConstrainedModel& model, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& sigma, const Dataset& validation,
                             const Eigen::MatrixXd& w, const MpecOptions& options) {
  validate_constrained_model(model);
  validate_mpec_options(options);
  check_weight_matrix(w, model.q);
  if (theta.size() != model.theta_dim || sigma.size() != model.sigma_dim)
    throw ConfigurationError(who(model) + ": frozen θ or σ has the wrong dimension");
  if (validation.size() < 1) throw ConfigurationError("empty validation set");
  const Index a = model.theta_dim + model.sigma_dim;
  const AlOutcome al = augmented_lagrangian(model, validation, w, join(theta, sigma),
                                            std::vector<bool>(static_cast<std::size_t>(a), true),
                                            options);
  MpecValidation out;
  out.violation = al.violation;
  out.eta = unflatten(al.eta, validation.size(), model.eta_per_obs);
  if (!al.feasible) {
    out.feasible = false;
    out.score = kInf;
    out.diagnostic = "constraints cannot be met at the trained (θ, σ): max violation " +
                     number(al.violation);
    return out;
  }
  if (!al.stationary) {
    throw EstimationError(who(model) + ": validation solve stalled with KKT residual " +
                              number(al.kkt),
                          al.eta, al.objective);
  }
  out.score = al.objective;
  return out;
}

double profile_mpec(const ConstrainedModel& model, const Dataset& data,
                    const Eigen::VectorXd& theta, const Eigen::MatrixXd& w,
                    const MpecOptions& options) {
  validate_constrained_model(model);
  validate_mpec_options(options);
  check_weight_matrix(w, model.q);
  if (theta.size() != model.theta_dim)
    throw ConfigurationError(who(model) + ": θ has the wrong dimension");
  std::vector<bool> frozen(static_cast<std::size_t>(model.theta_dim + model.sigma_dim), false);
  std::fill(frozen.begin(), frozen.begin() + model.theta_dim, true);
  const AlOutcome al =
      augmented_lagrangian(model, data, w, join(theta, sigma_start(model)), frozen, options);
  if (!al.feasible) return kInf;
  if (!al.stationary)
    throw EstimationError(who(model) + ": profile solve stalled with KKT residual " +
                              number(al.kkt),
                          join(al.u, al.eta), al.objective);
  return al.objective;
}

CvReport cross_validate_mpec(const std::vector<ConstrainedModel>& models, const Dataset& input,
                             int r, int k, const WeightingSpec& w, const MpecOptions& options,
                             const CvOptions& cv) {
  if (models.empty()) throw ConfigurationError("cross_validate_mpec needs at least one model");
  for (const auto& m : models) validate_constrained_model(m);
  validate_mpec_options(options);

  CvReport report;
  std::optional<Dataset> shuffled;
  if (cv.shuffle_seed) shuffled = input.shuffled(*cv.shuffle_seed, &report.permutation);
  const Dataset& data = shuffled ? *shuffled : input;
  report.plan = make_splits(data.size(), r, k);
  const std::size_t n_sub = report.plan.subset_count();

  struct Task {
    Eigen::VectorXd params;
    Eigen::MatrixXd weight;
    double train = 0.0;
    double score = 0.0;
    std::string error;
  };
  std::vector<Task> tasks(models.size() * n_sub);
  parallel_for(tasks.size(), cv.parallelism, [&](std::size_t i) {
    const auto& model = models[i / n_sub];
    const std::size_t s = i % n_sub;
    Task& task = tasks[i];
    try {
      const Dataset train = data.subset(report.plan.training_rows(s));
      const ResolvedWeighting ws = resolve_weighting(w, model.q, model.instruments, train);
      task.weight = ws.matrix;
      const ConstrainedEstimate est = estimate_mpec(model, train, ws, options);
      task.params = join(est.theta, est.sigma);
      task.train = est.objective;
      const MpecValidation val = validate_mpec(model, est.theta, est.sigma,
                                               data.subset(report.plan.validation_rows(s)),
                                               ws.matrix, options);
      task.score = val.score;
      if (!val.feasible) task.error = val.diagnostic;
    } catch (const std::exception& e) {
      task.error = e.what();
    }
  });

  for (std::size_t m = 0; m < models.size(); ++m) {
    ModelCv out;
    out.name = models[m].name;
    double sum = 0.0;
    for (std::size_t s = 0; s < n_sub; ++s) {
      Task& task = tasks[m * n_sub + s];
      if (!task.error.empty() && !out.failed) {
        out.failed = true;
        out.failure = "subset " + std::to_string(s) + ": " + task.error;
      }
      out.scores.push_back(task.error.empty() ? task.score : kInf);
      out.train_scores.push_back(task.train);
      out.thetas.push_back(std::move(task.params));
      out.weights.push_back(std::move(task.weight));
      sum += out.scores.back();
    }
    out.mean = sum / static_cast<double>(n_sub);
    report.models.push_back(std::move(out));
  }
  report.selected = cv_criterion(report).selected;
  if (report.selected < 0) throw SelectionError("every model failed during cross-validation");
  return report;
}

namespace {

std::vector<Index> resolve_columns(Index p, std::vector<Index> columns) {
  if (columns.empty()) {
    for (Index i = 0; i < p; ++i) columns.push_back(i);
  }
  for (Index c : columns) {
    if (c < 0 || c >= p) throw ConfigurationError("linear model: regressor column out of range");
  }
  return columns;
}

}  // namespace

ConstrainedModel eliminable_linear_model(std::string name, Index p, Index c, bool intercept,
                                         std::vector<Index> columns, double box) {
  if (p < 1 || c < 1) throw ConfigurationError("linear model: p and c must be positive");
  const auto cols = resolve_columns(p, std::move(columns));
  const Index k = static_cast<Index>(cols.size());
  const Index z0 = 1 + p;
  const Index s = intercept ? 1 : 0;

  ConstrainedModel m;
  m.name = std::move(name);
  m.theta_dim = k;
  m.sigma_dim = s;
  m.eta_per_obs = 1;
  m.q = c;
  m.instrument_count = c;
  m.theta_box = ParamBox::uniform(k, -box, box);
  if (intercept) m.sigma_box = ParamBox::uniform(1, -box, box);
  m.moment = [z0, c](const ObsRef& v, const Eigen::VectorXd&, const Eigen::VectorXd&,
                     const ConstVecRef& eta, VecRef out) { out = v.segment(z0, c) * eta(0); };
  m.moment_jacobian = [z0, c, k, s](const ObsRef& v, const Eigen::VectorXd&,
                                    const Eigen::VectorXd&, const ConstVecRef&, MatRef out) {
    out.leftCols(k + s).setZero();
    out.col(k + s) = v.segment(z0, c);
  };
  m.obs_constraints = 1;
  m.obs_constraint = [cols, s](const ObsRef& v, const Eigen::VectorXd& th,
                               const Eigen::VectorXd& sg, const ConstVecRef& eta, VecRef out) {
    double fit = s ? sg(0) : 0.0;
    for (std::size_t i = 0; i < cols.size(); ++i) fit += v(1 + cols[i]) * th(static_cast<Index>(i));
    out(0) = eta(0) - (v(0) - fit);
  };
  m.obs_constraint_jacobian = [cols, s, k](const ObsRef& v, const Eigen::VectorXd&,
                                           const Eigen::VectorXd&, const ConstVecRef&,
                                           MatRef out) {
    for (Index i = 0; i < k; ++i) out(0, i) = v(1 + cols[static_cast<std::size_t>(i)]);
    if (s) out(0, k) = 1.0;
    out(0, k + s) = 1.0;
  };
  m.instruments.fn = [z0, c](const ObsRef& v, MatRef out) {
    out.row(0) = v.segment(z0, c).transpose();
  };
  m.instruments.cols = c;
  return m;
}

MomentModel eliminated_linear_model(std::string name, Index p, Index c, bool intercept,
                                    std::vector<Index> columns, double box) {
  if (p < 1 || c < 1) throw ConfigurationError("linear model: p and c must be positive");
  const auto cols = resolve_columns(p, std::move(columns));
  const Index k = static_cast<Index>(cols.size());
  const Index z0 = 1 + p;
  const Index s = intercept ? 1 : 0;

  MomentModel m;
  m.name = std::move(name);
  m.p = k + s;
  m.q = c;
  m.instrument_count = c;
  m.under_identified = m.q < m.p;
  m.box = ParamBox::uniform(k + s, -box, box);
  auto residual = [cols, k, s](const ObsRef& v, const Eigen::VectorXd& x) {
    double fit = s ? x(k) : 0.0;
    for (Index i = 0; i < k; ++i) fit += v(1 + cols[static_cast<std::size_t>(i)]) * x(i);
    return v(0) - fit;
  };
  m.moment = [residual, z0, c](const ObsRef& v, const Eigen::VectorXd& x, VecRef out) {
    out = v.segment(z0, c) * residual(v, x);
  };
  m.jacobian = [cols, z0, c, k, s](const ObsRef& v, const Eigen::VectorXd&, MatRef out) {
    for (Index i = 0; i < k; ++i)
      out.col(i) = -v.segment(z0, c) * v(1 + cols[static_cast<std::size_t>(i)]);
    if (s) out.col(k) = -v.segment(z0, c);
  };
  m.affine.assign(static_cast<std::size_t>(k + s), true);
  m.instruments.fn = [z0, c](const ObsRef& v, MatRef out) {
    out.row(0) = v.segment(z0, c).transpose();
  };
  m.instruments.cols = c;
  return m;
}

}  // namespace gmmcv
