#pragma once

// Bounded-norm CPD: minimize ||Y - Y_hat||^2 subject to sum_r eta_r^2 <=
// epsilon^2, by alternating ball-constrained mode updates (BALS) or by SQP
// over all factors (BSQP).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "epc/calculus.hpp"
#include "epc/correction.hpp"
#include "epc/cpd.hpp"
#include "epc/error.hpp"
#include "epc/scqp.hpp"
#include "epc/tensor.hpp"

namespace epc {

struct BoundConfig {
  /// Bound on ||eta||_2 (not squared).
  double epsilon = 1.0;
  double grow_factor = 2.0;
  double shrink_factor = 1.5;
  /// Adapt epsilon: grow on a stall, shrink while the error keeps dropping.
  bool adapt = false;
  /// A stall is less than stall_tol relative improvement over stall_window
  /// iterations.
  int stall_window = 20;
  double stall_tol = 1e-6;
  int max_iters = 1000;
  double target_rel_error = 1e-15;
  /// Fixed-bound convergence: relative improvement below this over `window`.
  double tol_rel_change = 1e-9;
  int window = 10;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
      throw std::invalid_argument("epsilon must be positive");
    if (!(grow_factor > 1.0) || !(shrink_factor > 1.0))
      throw std::invalid_argument("bound factors must exceed 1");
    if (stall_window < 1 || window < 1 || max_iters < 1)
      throw std::invalid_argument("invalid iteration settings");
  }
};

namespace detail {

/// Epsilon schedule shared by BALS and BSQP.
class BoundSchedule {
 public:
  explicit BoundSchedule(const BoundConfig& cfg) : cfg_(cfg), eps_(cfg.epsilon) {}

  double epsilon() const { return eps_; }

  /// Looks at the trace since the last change; returns true when epsilon moved.
  bool update(const RunTrace& trace, double eta_sq) {
    if (!cfg_.adapt) return false;
    const auto& r = trace.records();
    const auto w = static_cast<std::size_t>(cfg_.stall_window);
    if (r.size() < since_ + w + 1) return false;
    const double before = r[r.size() - 1 - w].rel_error;
    const double now = r.back().rel_error;
    if (before - now < cfg_.stall_tol * before) {
      eps_ *= cfg_.grow_factor;
    } else if (now < 0.1 * before && std::sqrt(eta_sq) * cfg_.shrink_factor <= eps_) {
      eps_ /= cfg_.shrink_factor;
    } else {
      return false;
    }
    since_ = r.size();
    return true;
  }

 private:
  BoundConfig cfg_;
  double eps_;
  std::size_t since_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// BALS

struct BalsModeInfo {
  /// Multiplier of the ball constraint; 0 when the least-squares update is
  /// interior. The update equals G (Gamma + lambda I)^{-1}.
  double lambda = 0.0;
  bool active = false;
};

/// Minimizes ||Y - Y_hat||^2 over U_eta^(mode) subject to ||U_eta||_F <= eps
/// with the other factors at unit norm. Returns a normalized model.
inline KruskalModel bals_mode_update(const DenseTensor& t, const KruskalModel& m, std::size_t mode,
                                     double eps, BalsModeInfo* info = nullptr) {
  check_compatible(t, m);
  check_mode(m.order(), mode);
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("bals: epsilon must be positive");
  KruskalModel out = normalize(m);
  const Matrix g = mttkrp(t, out, mode);
  const auto eig = detail::floored_eig(gram_skip(out, mode));
  const Matrix f = g * eig.v;
  const Vector fnorm = f.colwise().norm().transpose();

  scqp::ScqpProblem p;
  p.s = eig.sigma;
  p.c = -fnorm;
  p.radius = eps;
  const scqp::SphereSolution sol = scqp::solve_ball(p);
  if (info) {
    info->lambda = sol.lambda;
    info->active = sol.lambda > 0.0;
  }
  Matrix w = Matrix::Zero(f.rows(), f.cols());
  for (Eigen::Index r = 0; r < f.cols(); ++r) {
    if (fnorm[r] > 0.0)
      w.col(r) = (sol.z[r] / fnorm[r]) * f.col(r);
    else
      w(0, r) = sol.z[r];
  }
  out.factors[mode] = w * eig.v.transpose();
  out.weights.setOnes();
  return normalize(out);
}

inline DecompositionResult bals(const DenseTensor& t, const KruskalModel& init, const BoundConfig& cfg) {
  detail::check_init(t, init);
  cfg.validate();
  DecompositionResult res;
  detail::BoundSchedule sched(cfg);
  KruskalModel m = normalize(init);
  const double y_norm = t.norm();
  SolverOptions conv;
  conv.tol_rel_change = cfg.tol_rel_change;
  conv.window = cfg.window;
  for (int it = 0; it < cfg.max_iters; ++it) {
    BalsModeInfo info;
    for (std::size_t n = 0; n < m.order(); ++n) m = bals_mode_update(t, m, n, sched.epsilon(), &info);
    const double err = residual_norm(t, m) / y_norm;
    if (!std::isfinite(err)) throw NonFiniteError("bals: non-finite relative error");
    res.trace.add(err, m.weights.squaredNorm(), 0.0, info.lambda, sched.epsilon());
    res.iterations = it + 1;
    if (err <= cfg.target_rel_error) break;
    if (sched.update(res.trace, m.weights.squaredNorm())) continue;
    if (!cfg.adapt && detail::window_converged(res.trace, conv)) break;
  }
  res.model = m;
  return res;
}

// ---------------------------------------------------------------------------
// BSQP: SQP for  min c(theta)  s.t.  f(theta) <= epsilon^2

inline DecompositionResult bsqp(const DenseTensor& t, const KruskalModel& init, const BoundConfig& cfg) {
  detail::check_init(t, init);
  cfg.validate();
  using calculus::ParamVector;
  using calculus::StructuredHessian;

  DecompositionResult res;
  detail::BoundSchedule sched(cfg);
  const double y_norm = t.norm();
  ParamVector p = ParamVector::from_model(normalize(init));
  double c_now = calculus::c_value(t, p.factors());
  double f_now = calculus::f_value(p.factors());
  const calculus::DampingPolicy policy;
  double mu = 0.0, mu_start = 0.0;
  double lambda = 0.0;
  // Fraction of the constraint violation removed per step while infeasible.
  // Full linearized steps from far outside the ball overshoot.
  double reach = 1.0;
  // The error may rise while the iterate moves into the ball, so the window
  // test only counts iterations spent feasible.
  int feasible_run = 0;
  SolverOptions conv;
  conv.tol_rel_change = cfg.tol_rel_change;
  conv.window = cfg.window;

  for (int it = 0; it < cfg.max_iters; ++it) {
    const double bound = sched.epsilon() * sched.epsilon();
    const double tol_f = 1e-8 * bound;
    const auto factors = p.factors();
    const Vector gf = calculus::grad_f(std::span<const Matrix>(factors));
    const Vector gc = calculus::grad_c(t, std::span<const Matrix>(factors));
    const StructuredHessian h(factors, lambda, 1.0);
    if (mu == 0.0) {
      mu = policy.initial(h);
      mu_start = mu;
    }

    bool accepted = false;
    double step_lambda = lambda;
    try {
      const calculus::DampedInverse inv(h, mu);
      Vector d = -inv.apply(gc);
      double new_lambda = 0.0;
      if (f_now + gf.dot(d) > bound) {
        const double excess = f_now - bound;
        const auto step = calculus::solve_kkt_system(inv, gc, gf, excess > 0.0 ? reach * excess : excess);
        d = step.d_theta;
        new_lambda = step.lambda;
        if (new_lambda < 0.0) {
          // The bound is not binding along this direction.
          d = -inv.apply(gc);
          new_lambda = 0.0;
        }
      }
      ParamVector trial = p;
      trial.theta += d;
      double f_trial = calculus::f_value(trial.factors());
      // Second-order correction back onto the ball, as in SCEP. Also used
      // just outside the ball, where long steps otherwise leave the violation
      // almost unchanged.
      for (int k = 0; k < 3 && std::isfinite(f_trial) && f_trial > bound && f_now <= bound * (1.0 + 1e-3);
           ++k) {
        const auto tf = trial.factors();
        const Vector g = calculus::grad_f(std::span<const Matrix>(tf));
        const double gg = g.squaredNorm();
        if (!(gg > 0.0)) break;
        trial.theta -= ((f_trial - bound) / gg) * g;
        f_trial = calculus::f_value(trial.factors());
      }
      const double c_trial = calculus::c_value(t, trial.factors());
      const bool feasible_now = f_now <= bound + tol_f;
      // Inside the tolerance band, c alone would reject moves from slightly
      // outside the ball onto it; an exact l1 penalty accepts them.
      const double nu = 2.0 * std::max(std::abs(lambda), std::abs(new_lambda));
      auto merit = [&](double c, double f) { return c + nu * std::max(0.0, f - bound); };
      const bool ok = std::isfinite(c_trial) && std::isfinite(f_trial) &&
                      ((f_trial <= bound + tol_f && (merit(c_trial, f_trial) < merit(c_now, f_now) || !feasible_now)) ||
                       (!feasible_now && f_trial < f_now));
      if (ok) {
        p = ParamVector::from_model(trial.to_model());
        c_now = c_trial;
        f_now = calculus::f_value(p.factors());
        step_lambda = new_lambda;
        accepted = true;
      }
    } catch (const DampingTooSmall&) {
    }
    if (accepted) {
      lambda = step_lambda;
      mu = std::max(mu / policy.decrease, policy.min_ratio * mu_start);
      reach = std::min(1.0, 2.0 * reach);
    } else {
      mu *= policy.increase;
      if (f_now > bound) reach = std::max(1e-3, 0.5 * reach);
    }
    const double err = std::sqrt(std::max(0.0, c_now)) / y_norm;
    res.trace.add(err, f_now, mu, lambda, sched.epsilon());
    res.iterations = it + 1;
    if (err <= cfg.target_rel_error) break;
    if (mu > policy.max_ratio * mu_start) {
      res.stalled = true;
      break;
    }
    if (sched.update(res.trace, f_now)) {
      mu = policy.initial(StructuredHessian(p.factors(), lambda, 1.0));
      continue;
    }
    feasible_run = f_now <= bound * (1.0 + 1e-12) ? feasible_run + 1 : 0;
    if (!cfg.adapt && accepted && feasible_run > conv.window && detail::window_converged(res.trace, conv))
      break;
  }
  res.final_mu = mu;
  res.model = normalize(p.to_model());
  return res;
}

}  // namespace epc
