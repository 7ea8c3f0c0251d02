#pragma once

// Error preserving correction: minimize sum_r eta_r^2 subject to
// ||Y - Y_hat|| <= delta, by alternating closed-form mode updates (ACEP) or
// by SQP over all factors (SCEP), and the CPD driver that interleaves a
// fitting algorithm with corrections.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "epc/calculus.hpp"
#include "epc/cpd.hpp"
#include "epc/error.hpp"
#include "epc/scqp.hpp"
#include "epc/tensor.hpp"

namespace epc {

enum class CorrectionMethod { kAcep, kScep, kAcepThenScep };

struct EpcConfig {
  /// Error bound in Frobenius units of Y; negative means "current residual".
  double delta = -1.0;
  /// Applied to delta when a correction does not unlock further fitting.
  double delta_growth = 1.1;
  int max_correction_iters = 500;
  /// ACEP sweeps run before SCEP takes over.
  int switch_to_sqp_after = 5;
  /// Stop when ||eta||^2 changes by less than this fraction in an iteration.
  double tol = 1e-9;
  CorrectionMethod method = CorrectionMethod::kAcep;
  /// Driver: correct when ||eta||^2 >= trigger_tau * ||Y||^2.
  double trigger_tau = 10.0;
  /// Driver: fitter iteration counts after which a correction is forced.
  std::vector<int> schedule{10, 20, 50, 100};

  void validate() const {
    if (!(delta_growth >= 1.0)) throw std::invalid_argument("delta_growth must be >= 1");
    if (max_correction_iters < 1) throw std::invalid_argument("max_correction_iters must be >= 1");
    if (switch_to_sqp_after < 0) throw std::invalid_argument("switch_to_sqp_after must be >= 0");
    if (!(trigger_tau > 0.0)) throw std::invalid_argument("trigger_tau must be positive");
  }
};

/// Correction schedule used for the weighted-collinear example.
inline std::vector<int> extended_schedule() { return {10, 20, 50, 100, 2000}; }

namespace detail {

/// Gamma = V diag(sigma) V' with sigma floored at 1e-12 sigma_max.
struct FlooredEig {
  Matrix v;
  Vector sigma;
};

inline FlooredEig floored_eig(const Matrix& gamma) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gamma);
  if (eig.info() != Eigen::Success || !eig.eigenvalues().allFinite())
    throw NonFiniteError("eigendecomposition of the Gram product failed");
  FlooredEig out{eig.eigenvectors(), eig.eigenvalues()};
  const double floor = 1e-12 * std::max(out.sigma.maxCoeff(), std::numeric_limits<double>::min());
  out.sigma = out.sigma.cwiseMax(floor);
  return out;
}

inline double feasibility_slack(double delta, double y_norm) {
  return delta * (1.0 + 1e-10) + 1e-13 * y_norm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ACEP

struct AcepModeInfo {
  double delta_n = 0.0;
  bool applied = true;  ///< false when the candidate was rejected
};

/// Minimizes ||U_eta^(mode)||_F^2 subject to ||Y - Y_hat|| <= delta with the
/// other (unit-norm) factors fixed. Returns a normalized model. A candidate
/// that rounding pushes outside the feasible set, or that does not lower
/// the norm, is discarded in favour of the current mode.
inline KruskalModel acep_mode_update(const DenseTensor& t, const KruskalModel& m, std::size_t mode,
                                     double delta, AcepModeInfo* info = nullptr) {
  check_compatible(t, m);
  check_mode(m.order(), mode);
  if (!(delta >= 0.0) || !std::isfinite(delta))
    throw std::invalid_argument("acep: delta must be a nonnegative number");
  const KruskalModel cur = normalize(m);
  const double y_sq = t.squared_norm();

  const Matrix g = mttkrp(t, cur, mode);
  const auto eig = detail::floored_eig(gram_skip(cur, mode));
  const Matrix f = g * eig.v;
  const Vector inv_sqrt = eig.sigma.cwiseSqrt().cwiseInverse();
  const Matrix f_scaled = f * inv_sqrt.asDiagonal();  // F Sigma^{-1/2}
  const double fs_sq = f_scaled.squaredNorm();
  double delta_n_sq = delta * delta + fs_sq - y_sq;
  // Below the roundoff of the sum, delta_n is noise of order sqrt(eps)||Y||.
  if (delta_n_sq <= 64.0 * std::numeric_limits<double>::epsilon() * (delta * delta + fs_sq + y_sq))
    delta_n_sq = 0.0;
  const double delta_n = std::sqrt(std::max(0.0, delta_n_sq));

  const Eigen::Index rank = f.cols();
  const Vector fnorm = f.colwise().norm().transpose();
  auto candidate = [&](double dn) {
    Matrix w = f_scaled;
    if (dn > 0.0) {
      scqp::ScqpProblem p;
      p.s = dn * eig.sigma.cwiseInverse();
      p.c = -(fnorm.array() * inv_sqrt.array().cube()).matrix();
      p.radius = 1.0;
      const Vector z = scqp::solve_ball(p).z;
      Matrix zc = Matrix::Zero(f.rows(), rank);
      for (Eigen::Index r = 0; r < rank; ++r) {
        if (fnorm[r] > 0.0)
          zc.col(r) = (z[r] / fnorm[r]) * f.col(r);
        else
          zc(0, r) = z[r];
      }
      w -= dn * zc;
    }
    w = w * inv_sqrt.asDiagonal();  // (F Sigma^{-1/2} - delta_n Z) Sigma^{-1/2}
    KruskalModel out = cur;
    out.factors[mode] = w * eig.v.transpose();
    out.weights.setOnes();
    return normalize(out);
  };

  if (info) {
    info->delta_n = delta_n;
    info->applied = true;
  }
  const double y_norm = std::sqrt(y_sq);
  const double limit = detail::feasibility_slack(delta, y_norm);
  const double cur_eta = cur.weights.squaredNorm();
  // Only a feasible current point is a valid fallback.
  const bool cur_feasible = residual_norm(t, cur) <= limit;
  // delta_n^2 comes out of a cancellation; when the realized residual
  // overshoots, shrink delta_n^2 by the overshoot and try again.
  double dn_sq = std::max(0.0, delta_n_sq);
  for (int attempt = 0; attempt < 4; ++attempt) {
    const KruskalModel cand = candidate(std::sqrt(dn_sq));
    const double res = residual_norm(t, cand);
    if (res <= limit) {
      if (!cur_feasible || cand.weights.squaredNorm() <= cur_eta) return cand;
      break;
    }
    if (dn_sq == 0.0) break;
    dn_sq = std::max(0.0, dn_sq - 2.0 * (res * res - delta * delta));
  }
  if (info) info->applied = false;
  return cur;
}

inline DecompositionResult acep(const DenseTensor& t, const KruskalModel& init,
                                const EpcConfig& cfg = {}) {
  detail::check_init(t, init);
  cfg.validate();
  DecompositionResult res;
  KruskalModel m = normalize(init);
  const double y_norm = t.norm();
  const double start = residual_norm(t, m);
  const double delta = cfg.delta < 0.0 ? start : cfg.delta;
  if (start > detail::feasibility_slack(delta, y_norm))
    throw InfeasibleError("acep: starting residual exceeds delta");

  double eta_sq = m.weights.squaredNorm();
  for (int it = 0; it < cfg.max_correction_iters; ++it) {
    for (std::size_t n = 0; n < m.order(); ++n) m = acep_mode_update(t, m, n, delta);
    const double next = m.weights.squaredNorm();
    res.trace.add(residual_norm(t, m) / y_norm, next);
    res.iterations = it + 1;
    const bool done = eta_sq - next <= cfg.tol * eta_sq;
    eta_sq = next;
    if (done) break;
  }
  res.model = m;
  return res;
}

// ---------------------------------------------------------------------------
// SCEP: SQP for  min f(theta)  s.t.  c(theta) = delta^2

inline DecompositionResult scep(const DenseTensor& t, const KruskalModel& init,
                                const EpcConfig& cfg = {}) {
  detail::check_init(t, init);
  cfg.validate();
  using calculus::ParamVector;
  using calculus::StructuredHessian;

  DecompositionResult res;
  const double y_sq = t.squared_norm();
  const double y_norm = std::sqrt(y_sq);
  ParamVector p = ParamVector::from_model(init);
  double c_now = calculus::c_value(t, p.factors());
  const double delta = cfg.delta < 0.0 ? std::sqrt(c_now) : cfg.delta;
  const double bound = delta * delta;
  // Also relative to the bound: at small residuals 1e-8 ||Y||^2 alone would
  // let the error drift by a large fraction of delta. The floor covers
  // roundoff in c when delta is near zero.
  const double slack = detail::feasibility_slack(delta, y_norm);
  const double tol_c = std::min(1e-8 * y_sq, 1e-4 * bound) + (slack * slack - bound);
  double f_now = calculus::f_value(p.factors());

  ParamVector best = p;
  double best_f = c_now <= bound + tol_c ? f_now : std::numeric_limits<double>::infinity();
  double best_violation = std::max(0.0, c_now - bound);

  const calculus::DampingPolicy policy;
  double mu = 0.0, mu_start = 0.0;
  double lambda = -1.0;
  int quiet = 0;

  for (int it = 0; it < cfg.max_correction_iters; ++it) {
    const auto factors = p.factors();
    const Vector gf = calculus::grad_f(std::span<const Matrix>(factors));
    const Vector gc = calculus::grad_c(t, std::span<const Matrix>(factors));
    if (lambda < 0.0) {
      const double gg = gc.squaredNorm();
      lambda = gg > 0.0 ? std::max(0.0, -gc.dot(gf) / gg) : 0.0;
    }
    const StructuredHessian h(factors, 1.0, std::max(0.0, lambda));
    if (mu == 0.0) {
      mu = policy.initial(h);
      mu_start = mu;
    }

    bool accepted = false;
    double step_lambda = lambda;
    try {
      const calculus::DampedInverse inv(h, mu);
      const auto step = calculus::solve_kkt_system(inv, gf, gc, c_now - bound);
      ParamVector trial = p;
      trial.theta += step.d_theta;
      double c_trial = calculus::c_value(t, trial.factors());
      // Second-order correction: Gauss-Newton steps back onto the
      // constraint along its gradient, undoing the curvature overshoot.
      for (int k = 0; k < 3 && std::isfinite(c_trial) && c_trial > bound + tol_c; ++k) {
        const auto tf = trial.factors();
        const Vector g = calculus::grad_c(t, std::span<const Matrix>(tf));
        const double gg = g.squaredNorm();
        if (!(gg > 0.0)) break;
        trial.theta -= ((c_trial - bound) / gg) * g;
        c_trial = calculus::c_value(t, trial.factors());
      }
      const double f_trial = calculus::f_value(trial.factors());
      const bool feasible_now = c_now <= bound + tol_c;
      const bool ok = std::isfinite(c_trial) && std::isfinite(f_trial) &&
                      ((c_trial <= bound + tol_c && (f_trial < f_now || !feasible_now)) ||
                       (!feasible_now && c_trial < c_now));
      if (ok) {
        const double rel_drop = (f_now - f_trial) / std::max(f_now, 1e-300);
        p = ParamVector::from_model(trial.to_model());
        c_now = c_trial;
        f_now = calculus::f_value(p.factors());
        step_lambda = step.lambda;
        accepted = true;
        quiet = (c_now <= bound + tol_c && rel_drop <= cfg.tol) ? quiet + 1 : 0;
      }
    } catch (const DampingTooSmall&) {
    }
    if (accepted) {
      lambda = std::max(0.0, step_lambda);
      mu = std::max(mu / policy.decrease, policy.min_ratio * mu_start);
      const double violation = std::max(0.0, c_now - bound);
      if (violation <= tol_c) {
        if (f_now < best_f) {
          best_f = f_now;
          best = p;
        }
      } else if (!std::isfinite(best_f) && violation < best_violation) {
        best_violation = violation;
        best = p;
      }
    } else {
      mu *= policy.increase;
    }
    res.trace.add(std::sqrt(std::max(0.0, c_now)) / y_norm, f_now, mu, lambda);
    res.iterations = it + 1;
    if (mu > policy.max_ratio * mu_start) {
      res.stalled = !std::isfinite(best_f);
      break;
    }
    if (quiet >= 3) break;
  }
  res.final_mu = mu;
  res.stalled = res.stalled || !std::isfinite(best_f);
  res.model = normalize(best.to_model());
  return res;
}

// ---------------------------------------------------------------------------
// CPD with EPC

enum class FitMethod { kAls, kFlm };

struct CpdEpcResult : DecompositionResult {
  int fit_iterations = 0;
  int corrections = 0;
  /// ||eta||^2 right before and right after the first correction.
  double eta_sq_before_first = 0.0;
  double eta_sq_after_first = 0.0;
};

inline DecompositionResult run_correction(const DenseTensor& t, const KruskalModel& m,
                                          const EpcConfig& cfg) {
  switch (cfg.method) {
    case CorrectionMethod::kAcep:
      return acep(t, m, cfg);
    case CorrectionMethod::kScep: {
      EpcConfig warm = cfg;
      warm.max_correction_iters = std::max(1, cfg.switch_to_sqp_after);
      DecompositionResult a;
      if (cfg.switch_to_sqp_after > 0)
        a = acep(t, m, warm);
      else
        a.model = m;
      EpcConfig sq = cfg;
      if (sq.delta < 0.0) sq.delta = residual_norm(t, m);
      DecompositionResult s = scep(t, a.model, sq);
      a.trace.append(s.trace);
      s.trace = a.trace;
      s.iterations += a.iterations;
      return s;
    }
    case CorrectionMethod::kAcepThenScep: {
      DecompositionResult a = acep(t, m, cfg);
      EpcConfig sq = cfg;
      sq.switch_to_sqp_after = 0;
      if (sq.delta < 0.0) sq.delta = residual_norm(t, m);
      DecompositionResult s = scep(t, a.model, sq);
      if (s.model.weights.squaredNorm() > a.model.weights.squaredNorm()) s.model = a.model;
      a.trace.append(s.trace);
      s.trace = a.trace;
      s.iterations += a.iterations;
      return s;
    }
  }
  throw std::logic_error("unknown correction method");
}

struct GrownCorrection {
  DecompositionResult result;
  /// Bound actually used, after growth.
  double delta = 0.0;
  int growth_steps = 0;
};

/// Runs a correction at `delta`, then keeps multiplying delta by
/// cfg.delta_growth and correcting the result again, for as long as a grown
/// round lowers ||eta||^2 by at least `min_drop` (a fraction), at most
/// `max_growth` times and never beyond ||Y|| / 2. Useful at a fitter stall,
/// where the current residual leaves almost no room to move.
inline GrownCorrection correct_with_growth(const DenseTensor& t, const KruskalModel& m, double delta,
                                           const EpcConfig& cfg, int max_growth = 20,
                                           double min_drop = 0.01) {
  GrownCorrection out;
  out.delta = delta;
  EpcConfig c = cfg;
  c.delta = delta;
  out.result = run_correction(t, m, c);
  if (cfg.delta_growth == 1.0) return out;
  double prev = normalize(m).weights.squaredNorm();
  // At delta >= ||Y|| the zero model is feasible; stay well clear of it.
  const double cap = 0.5 * t.norm();
  while (out.growth_steps < max_growth && out.delta * cfg.delta_growth <= cap) {
    const double now = out.result.model.weights.squaredNorm();
    if (out.growth_steps > 0 && prev - now < min_drop * prev) break;
    prev = now;
    out.delta *= cfg.delta_growth;
    ++out.growth_steps;
    c.delta = out.delta;
    DecompositionResult next = run_correction(t, out.result.model, c);
    out.result.trace.append(next.trace);
    next.trace = out.result.trace;
    next.iterations += out.result.iterations;
    out.result = std::move(next);
  }
  return out;
}

/// Alternates a fitting algorithm with error preserving corrections. A
/// correction runs at the scheduled fitter iteration counts, whenever the
/// fitter stalls or converges above the target, and whenever
/// ||eta||^2 >= trigger_tau ||Y||^2. The bound is the current residual; after
/// a fitter stop it grows by delta_growth until the correction actually lowers
/// ||eta||^2. Six corrections in a row that do not let the fitter improve end
/// the run as stalled.
inline CpdEpcResult cpd_epc(const DenseTensor& t, const KruskalModel& init, FitMethod fit,
                            const SolverOptions& opts, const EpcConfig& cfg) {
  detail::check_init(t, init);
  opts.validate();
  cfg.validate();
  CpdEpcResult res;
  KruskalModel m = normalize(init);
  const double y_sq = t.squared_norm();
  double err_at_last_correction = std::numeric_limits<double>::infinity();
  std::vector<int> schedule = cfg.schedule;
  std::sort(schedule.begin(), schedule.end());
  std::size_t next_sched = 0;
  double mu_carry = 0.0;
  // Consecutive corrections without fitter progress; bounds the outer loop.
  int idle = 0;

  while (res.fit_iterations < opts.max_iters) {
    while (next_sched < schedule.size() && schedule[next_sched] <= res.fit_iterations) ++next_sched;
    const int stop_at = next_sched < schedule.size() ? std::min(schedule[next_sched], opts.max_iters)
                                                     : opts.max_iters;
    SolverOptions chunk = opts;
    chunk.max_iters = stop_at - res.fit_iterations;
    chunk.mu0 = mu_carry;
    const DecompositionResult fr = fit == FitMethod::kFlm ? flm(t, m, chunk) : als(t, m, chunk);
    m = fr.model;
    res.trace.append(fr.trace);
    res.trace.regularized = res.trace.regularized || fr.trace.regularized;
    res.fit_iterations += fr.iterations;
    mu_carry = fr.stalled ? 0.0 : fr.final_mu;
    const double err = fr.trace.empty() ? relative_error(t, m) : fr.trace.back().rel_error;
    if (err <= opts.target_rel_error) break;

    const bool scheduled = res.fit_iterations == stop_at && stop_at < opts.max_iters;
    const bool early = fr.iterations < chunk.max_iters;  // stalled or converged
    const bool trigger = m.weights.squaredNorm() >= cfg.trigger_tau * y_sq;
    if (!(scheduled || early || trigger)) continue;
    if (res.fit_iterations >= opts.max_iters) break;

    idle = err >= err_at_last_correction * (1.0 - 1e-3) ? idle + 1 : 0;
    if (idle > 5) {
      res.stalled = true;
      break;
    }
    err_at_last_correction = err;
    const double before = m.weights.squaredNorm();
    const GrownCorrection grown = correct_with_growth(t, m, residual_norm(t, m), cfg, early ? 20 : 0);
    const DecompositionResult& cr = grown.result;
    if (res.corrections == 0) {
      res.eta_sq_before_first = before;
      res.eta_sq_after_first = cr.model.weights.squaredNorm();
    }
    ++res.corrections;
    m = cr.model;
    res.trace.append(cr.trace);
    mu_carry = 0.0;
  }
  res.iterations = static_cast<int>(res.trace.size());
  res.model = m;
  res.final_mu = mu_carry;
  if (!res.trace.empty() && res.trace.back().rel_error > opts.target_rel_error &&
      res.fit_iterations < opts.max_iters)
    res.stalled = true;
  return res;
}

}  // namespace epc
