#pragma once

// Baseline CP solvers: ALS and a damped Gauss-Newton (fLM) method, plus the
// shared run-trace plumbing.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "epc/calculus.hpp"
#include "epc/error.hpp"
#include "epc/tensor.hpp"

namespace epc {

struct SolverOptions {
  int max_iters = 1000;
  /// Stop when the relative error improved by less than this fraction over
  /// the last `window` iterations.
  double tol_rel_change = 1e-9;
  int window = 10;
  /// Stop as soon as the relative error reaches this value.
  double target_rel_error = 1e-15;
  /// Initial damping; <= 0 selects the default policy.
  double mu0 = 0.0;
  /// Tikhonov weight on ||theta||^2 (fLM); multiplied by tikh_decay after
  /// every accepted step.
  double mu_tikh = 0.0;
  double tikh_decay = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (max_iters < 1) throw std::invalid_argument("max_iters must be at least 1");
    if (!(tol_rel_change >= 0.0) || window < 1)
      throw std::invalid_argument("invalid stopping tolerance");
    if (!(mu_tikh >= 0.0)) throw std::invalid_argument("mu_tikh must be nonnegative");
  }
};

struct TraceRecord {
  int iter = 0;
  double rel_error = 0.0;
  double eta_sq_norm = 0.0;
  double mu = 0.0;
  double lambda = 0.0;
  double seconds = 0.0;
  /// Norm bound in force (bounded solvers), else 0.
  double bound = 0.0;
};

class RunTrace {
 public:
  RunTrace() : start_(std::chrono::steady_clock::now()) {}

  void add(double rel_error, double eta_sq, double mu = 0.0, double lambda = 0.0,
           double bound = 0.0) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    records_.push_back({next_iter(), rel_error, eta_sq, mu, lambda, secs + offset_seconds_, bound});
  }

  /// Appends `other`, renumbering its iterations after ours.
  void append(const RunTrace& other) {
    const double base_secs = records_.empty() ? 0.0 : records_.back().seconds;
    for (TraceRecord r : other.records_) {
      r.iter = next_iter();
      r.seconds += base_secs;
      records_.push_back(r);
    }
    offset_seconds_ = records_.empty() ? 0.0 : records_.back().seconds;
    start_ = std::chrono::steady_clock::now();
  }

  const std::vector<TraceRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  const TraceRecord& back() const { return records_.back(); }
  std::size_t size() const { return records_.size(); }

  /// A Tikhonov-regularized solve replaced a singular one at least once.
  bool regularized = false;

 private:
  int next_iter() const { return records_.empty() ? 1 : records_.back().iter + 1; }

  std::vector<TraceRecord> records_;
  std::chrono::steady_clock::time_point start_;
  double offset_seconds_ = 0.0;
};

struct DecompositionResult {
  KruskalModel model;
  RunTrace trace;
  /// Damping overflow (fLM/SQP) or no progress possible.
  bool stalled = false;
  double final_mu = 0.0;
  int iterations = 0;
};

// ---------------------------------------------------------------------------
// Initialization

/// Factor [I_I, 1, ...]: identity columns followed by all-ones columns.
inline Matrix identity_ones_factor(Eigen::Index rows, Eigen::Index rank) {
  Matrix u = Matrix::Ones(rows, rank);
  const Eigen::Index k = std::min(rows, rank);
  u.leftCols(k) = Matrix::Identity(rows, k);
  return u;
}

inline KruskalModel init_identity_ones(const Shape& dims, Eigen::Index rank) {
  std::vector<Matrix> f;
  for (auto d : dims) f.push_back(identity_ones_factor(static_cast<Eigen::Index>(d), rank));
  return KruskalModel(Vector::Ones(rank), std::move(f));
}

inline KruskalModel init_random(const Shape& dims, Eigen::Index rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<Matrix> f;
  for (auto d : dims) {
    Matrix u(static_cast<Eigen::Index>(d), rank);
    for (Eigen::Index j = 0; j < rank; ++j)
      for (Eigen::Index i = 0; i < u.rows(); ++i) u(i, j) = nd(rng);
    f.push_back(std::move(u));
  }
  return normalize(KruskalModel(Vector::Ones(rank), std::move(f)));
}

namespace detail {

inline void check_init(const DenseTensor& t, const KruskalModel& init) {
  init.validate();
  check_compatible(t, init);
  if (!init.weights.allFinite()) throw NonFiniteError("initial model has non-finite weights");
  for (const auto& f : init.factors)
    if (!f.allFinite()) throw NonFiniteError("initial model has non-finite factors");
  if (t.squared_norm() == 0.0) throw std::domain_error("cannot decompose a zero tensor");
}

/// Relative-improvement window test shared by the solvers.
inline bool window_converged(const RunTrace& trace, const SolverOptions& opts) {
  const auto& r = trace.records();
  if (static_cast<int>(r.size()) <= opts.window) return false;
  const double before = r[r.size() - 1 - static_cast<std::size_t>(opts.window)].rel_error;
  const double now = r.back().rel_error;
  return before - now <= opts.tol_rel_change * before;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ALS

/// U_eta^(n) = G_n Gamma_{-n}^{-1} for a model whose other factors have unit
/// columns. Falls back to a tiny Tikhonov shift when Gamma_{-n} is singular;
/// `regularized` reports it.
inline Matrix als_mode_solution(const Matrix& gn, const Matrix& gamma, bool* regularized = nullptr) {
  Eigen::LLT<Matrix> llt(gamma);
  const double rc = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
  if (rc > 1e-15) return llt.solve(gn.transpose()).transpose();
  if (regularized) *regularized = true;
  Matrix shifted = gamma;
  shifted.diagonal().array() += 1e-12 * gamma.trace() / static_cast<double>(gamma.rows());
  return shifted.ldlt().solve(gn.transpose()).transpose();
}

/// One ALS update of `mode` on a normalized model; returns the new model
/// (normalized).
inline KruskalModel als_mode_update(const DenseTensor& t, const KruskalModel& m, std::size_t mode,
                                    bool* regularized = nullptr) {
  KruskalModel out = normalize(m);
  const Matrix gn = mttkrp(t, out, mode);
  out.factors[mode] = als_mode_solution(gn, gram_skip(out, mode), regularized);
  out.weights.setOnes();
  return normalize(out);
}

inline DecompositionResult als(const DenseTensor& t, const KruskalModel& init,
                               const SolverOptions& opts = {}) {
  detail::check_init(t, init);
  opts.validate();
  DecompositionResult res;
  KruskalModel m = normalize(init);
  const double y_norm = t.norm();
  for (int it = 0; it < opts.max_iters; ++it) {
    for (std::size_t n = 0; n < m.order(); ++n) m = als_mode_update(t, m, n, &res.trace.regularized);
    const double err = residual_norm(t, m) / y_norm;
    if (!std::isfinite(err)) throw NonFiniteError("als: non-finite relative error");
    res.trace.add(err, m.weights.squaredNorm());
    res.iterations = it + 1;
    if (err <= opts.target_rel_error || detail::window_converged(res.trace, opts)) break;
  }
  res.model = m;
  return res;
}

// ---------------------------------------------------------------------------
// fLM: damped Gauss-Newton on ||Y - Y_hat||^2 + (mu_tikh/2) ||theta||^2

inline DecompositionResult flm(const DenseTensor& t, const KruskalModel& init,
                               const SolverOptions& opts = {}) {
  detail::check_init(t, init);
  opts.validate();
  using calculus::DampedInverse;
  using calculus::ParamVector;
  using calculus::StructuredHessian;

  DecompositionResult res;
  ParamVector p = ParamVector::from_model(init);
  const double y_norm = t.norm();
  double tikh = opts.mu_tikh;
  auto objective = [&](const ParamVector& q, double* c_out) {
    const double c = calculus::c_value(t, q.factors());
    if (c_out) *c_out = c;
    return c + 0.5 * tikh * q.theta.squaredNorm();
  };

  double c_now = 0.0;
  double phi = objective(p, &c_now);
  const calculus::DampingPolicy policy;
  double mu = 0.0;
  double mu_start = 0.0;

  for (int it = 0; it < opts.max_iters; ++it) {
    const auto factors = p.factors();
    const StructuredHessian h(factors, 0.0, 1.0);
    if (mu == 0.0) {
      mu = opts.mu0 > 0.0 ? opts.mu0 : policy.initial(h);
      mu_start = mu;
    }
    Vector g = calculus::grad_c(t, std::span<const Matrix>(factors));
    if (tikh > 0.0) g += tikh * p.theta;

    bool accepted = false;
    if (g.norm() > 0.0) {
      try {
        const DampedInverse inv(h, mu + tikh);
        ParamVector trial = p;
        trial.theta -= inv.apply(g);
        double c_trial = 0.0;
        const double phi_trial = objective(trial, &c_trial);
        if (std::isfinite(phi_trial) && phi_trial < phi) {
          p = ParamVector::from_model(trial.to_model());  // rebalance
          phi = objective(p, &c_now);
          accepted = true;
        }
      } catch (const DampingTooSmall&) {
      }
    }
    if (accepted) {
      mu = std::max(mu / policy.decrease, policy.min_ratio * mu_start);
      tikh *= opts.tikh_decay;
      phi = objective(p, &c_now);
    } else {
      mu *= policy.increase;
    }
    const double err = std::sqrt(std::max(0.0, c_now)) / y_norm;
    res.trace.add(err, calculus::f_value(p.factors()), mu);
    res.iterations = it + 1;
    if (err <= opts.target_rel_error || g.norm() == 0.0) break;
    if (mu > policy.max_ratio * mu_start) {
      res.stalled = true;
      break;
    }
    if (accepted && detail::window_converged(res.trace, opts)) break;
  }
  res.final_mu = mu;
  res.model = normalize(p.to_model());
  return res;
}

}  // namespace epc
