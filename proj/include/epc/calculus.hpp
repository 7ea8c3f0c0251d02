#pragma once

// Gradients and structured Hessians of
//     f(theta) = sum_r prod_n ||u_r^(n)||^2        (squared rank-1 norms)
//     c(theta) = ||Y - Y_hat(theta)||_F^2          (fit)
// with theta = [vec(U^(1)); ...; vec(U^(N))] (column-major vec, unit-length
// constraints relaxed). Hessians of c are the Gauss-Newton matrix J'J scaled
// to match c, which is what every SQP/LM step in the library uses.
//
// All Hessians are kept in factored form: per-mode Kronecker blocks plus a
// low-rank coupling between modes. Dense materialization is reserved for
// small instances (tests).

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "epc/error.hpp"
#include "epc/tensor.hpp"

namespace epc::calculus {

/// theta plus the shape needed to read it back as factor matrices.
struct ParamVector {
  Vector theta;
  Shape dims;
  Eigen::Index rank = 0;

  std::size_t order() const { return dims.size(); }

  Eigen::Index offset(std::size_t mode) const {
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < mode; ++k) off += static_cast<Eigen::Index>(dims[k]) * rank;
    return off;
  }

  Eigen::Map<const Matrix> factor(std::size_t mode) const {
    return {theta.data() + offset(mode), static_cast<Eigen::Index>(dims[mode]), rank};
  }
  Eigen::Map<Matrix> factor(std::size_t mode) {
    return {theta.data() + offset(mode), static_cast<Eigen::Index>(dims[mode]), rank};
  }

  std::vector<Matrix> factors() const {
    std::vector<Matrix> out;
    out.reserve(dims.size());
    for (std::size_t n = 0; n < dims.size(); ++n) out.emplace_back(factor(n));
    return out;
  }

  /// Balanced absorption of the weights (see epc::balance()).
  static ParamVector from_model(const KruskalModel& m) {
    const KruskalModel b = balance(m);
    return from_factors(b.factors);
  }

  static ParamVector from_factors(std::span<const Matrix> factors) {
    ParamVector p;
    p.rank = factors.front().cols();
    Eigen::Index total = 0;
    for (const auto& f : factors) {
      p.dims.push_back(static_cast<std::size_t>(f.rows()));
      total += f.size();
    }
    p.theta.resize(total);
    Eigen::Index off = 0;
    for (const auto& f : factors) {
      p.theta.segment(off, f.size()) = Eigen::Map<const Vector>(f.data(), f.size());
      off += f.size();
    }
    return p;
  }

  /// Unit weights; the factors carry all the scale.
  KruskalModel to_model() const { return KruskalModel(Vector::Ones(rank), factors()); }
};

// ---------------------------------------------------------------------------
// Function values and gradients

inline double f_value(std::span<const Matrix> factors) {
  Vector beta = Vector::Ones(factors.front().cols());
  for (const auto& u : factors) beta.array() *= u.colwise().squaredNorm().transpose().array();
  return beta.sum();
}

inline double c_value(const DenseTensor& t, std::span<const Matrix> factors) {
  const KruskalModel m(Vector::Ones(factors.front().cols()),
                       std::vector<Matrix>(factors.begin(), factors.end()));
  const double r = residual_norm(t, m);
  return r * r;
}

/// Block n: 2 U^(n) diag(beta_{-n}), beta_{-n} = prod_{k != n} ||u_r^(k)||^2.
inline Vector grad_f(std::span<const Matrix> factors) {
  const Eigen::Index rank = factors.front().cols();
  Eigen::Index total = 0;
  for (const auto& u : factors) total += u.size();
  Vector g(total);
  Eigen::Index off = 0;
  for (std::size_t n = 0; n < factors.size(); ++n) {
    Vector beta = Vector::Ones(rank);
    for (std::size_t k = 0; k < factors.size(); ++k)
      if (k != n) beta.array() *= factors[k].colwise().squaredNorm().transpose().array();
    const Matrix block = 2.0 * factors[n] * beta.asDiagonal();
    g.segment(off, block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
    off += block.size();
  }
  return g;
}

inline Vector grad_f(const KruskalModel& m) {
  return grad_f(std::span<const Matrix>(balance(m).factors));
}

/// Block n: 2 (U^(n) Gamma_{-n} - G_n). The G_n are returned through `mttkrps`
/// when requested, so callers can reuse them.
inline Vector grad_c(const DenseTensor& t, std::span<const Matrix> factors,
                     std::vector<Matrix>* mttkrps = nullptr) {
  Eigen::Index total = 0;
  for (const auto& u : factors) total += u.size();
  Vector g(total);
  if (mttkrps) mttkrps->clear();
  Eigen::Index off = 0;
  for (std::size_t n = 0; n < factors.size(); ++n) {
    Matrix gn = mttkrp(t, factors, n);
    const Matrix block = 2.0 * (factors[n] * gram_skip(factors, n) - gn);
    g.segment(off, block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
    off += block.size();
    if (mttkrps) mttkrps->push_back(std::move(gn));
  }
  return g;
}

inline Vector grad_c(const DenseTensor& t, const KruskalModel& m) {
  check_compatible(t, m);
  return grad_c(t, std::span<const Matrix>(balance(m).factors));
}

// ---------------------------------------------------------------------------
// Permutation and dvec helpers

/// P_{R,R}: vec(X) = P vec(X') for R x R matrices.
inline Matrix perm_matrix_rr(Eigen::Index r) {
  if (r < 1) throw std::invalid_argument("perm_matrix_rr: R must be positive");
  Matrix p = Matrix::Zero(r * r, r * r);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < r; ++j) p(i + r * j, j + r * i) = 1.0;
  return p;
}

/// diag(vec(K)).
inline Matrix dvec(const Matrix& k) {
  return Eigen::Map<const Vector>(k.data(), k.size()).asDiagonal();
}

/// Applies P_{R,R} dvec(W) to the columns of x without forming either.
inline Matrix perm_dvec_apply(const Matrix& w, const Matrix& x) {
  const Eigen::Index r = w.rows();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < r; ++j)
      out.row(i + r * j) = w(j, i) * x.row(j + r * i);
  return out;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// ---------------------------------------------------------------------------
// Structured Hessian

/// H = weight_f * Hess(f) + weight_c * J'J(c) in factored form.
///
/// Per-mode diagonal blocks are 2 A_n (x) I_{I_n} with
///     A_n = w_c Gamma_{-n} + w_f diag(beta_{-n}),
/// and the (n, m) off-diagonal block has (r, s) sub-block
///     2 Omega_nm(r, s) u_s^(n) u_r^(m)',
///     Omega_nm = w_c Gamma_{-(n,m)} + 2 w_f diag(Gamma_{-(n,m)}).
/// With w_f = 1, w_c = lambda this is the Lagrangian Hessian of the
/// correction problem; w_f = lambda, w_c = 1 gives the bounded problem;
/// w_f = 0, w_c = 1 is the Gauss-Newton matrix used by fLM.
class StructuredHessian {
 public:
  StructuredHessian(std::span<const Matrix> factors, double weight_f, double weight_c)
      : factors_(factors.begin(), factors.end()), weight_f_(weight_f), weight_c_(weight_c) {
    if (factors_.empty()) throw ShapeError("StructuredHessian: no factors");
    rank_ = factors_[0].cols();
    for (const auto& u : factors_) {
      if (u.cols() != rank_) throw ShapeError("StructuredHessian: mismatched ranks");
      grams_.push_back(u.transpose() * u);
      size_ += u.size();
    }
    gamma_ = Matrix::Ones(rank_, rank_);
    for (const auto& g : grams_) gamma_.array() *= g.array();
    const std::size_t order = factors_.size();
    for (std::size_t n = 0; n < order; ++n) {
      Matrix skip = Matrix::Ones(rank_, rank_);
      for (std::size_t k = 0; k < order; ++k)
        if (k != n) skip.array() *= grams_[k].array();
      gamma_skip_.push_back(skip);
      Matrix a = weight_c_ * skip;
      a.diagonal() += weight_f_ * skip.diagonal();
      blocks_.push_back(std::move(a));
    }
  }

  std::size_t order() const { return factors_.size(); }
  Eigen::Index rank() const { return rank_; }
  Eigen::Index size() const { return size_; }
  double weight_f() const { return weight_f_; }
  double weight_c() const { return weight_c_; }
  const std::vector<Matrix>& factors() const { return factors_; }
  const Matrix& gram(std::size_t n) const { return grams_[n]; }
  const Matrix& gamma() const { return gamma_; }
  const Matrix& gamma_skip(std::size_t n) const { return gamma_skip_[n]; }
  /// A_n above (half-scale Kronecker factor of the n-th diagonal block).
  const Matrix& block_core(std::size_t n) const { return blocks_[n]; }

  Eigen::Index dim(std::size_t n) const { return factors_[n].rows(); }
  Eigen::Index offset(std::size_t n) const {
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < n; ++k) off += factors_[k].size();
    return off;
  }

  /// Gamma_{-(n,m)}: Hadamard product of the Grams over k not in {n, m}.
  Matrix gamma_skip2(std::size_t n, std::size_t m) const {
    Matrix g = Matrix::Ones(rank_, rank_);
    for (std::size_t k = 0; k < order(); ++k)
      if (k != n && k != m) g.array() *= grams_[k].array();
    return g;
  }

  Matrix coupling(std::size_t n, std::size_t m) const {
    const Matrix g = gamma_skip2(n, m);
    Matrix omega = weight_c_ * g;
    omega.diagonal() += 2.0 * weight_f_ * g.diagonal();
    return omega;
  }

  /// Gamma_w = w_c Gamma + 2 w_f diag(Gamma), the core of the rank-R^2 form.
  Matrix core_gamma() const {
    Matrix g = weight_c_ * gamma_;
    g.diagonal() += 2.0 * weight_f_ * gamma_.diagonal();
    return g;
  }

  /// H v.
  Vector apply(const Vector& v) const {
    if (v.size() != size_) throw ShapeError("StructuredHessian::apply: size mismatch");
    Vector out(size_);
    std::vector<Matrix> inner;  // U^(m)' V^(m)
    for (std::size_t m = 0; m < order(); ++m)
      inner.push_back(factors_[m].transpose() * view(v, m));
    for (std::size_t n = 0; n < order(); ++n) {
      Matrix block = view(v, n) * blocks_[n];
      for (std::size_t m = 0; m < order(); ++m) {
        if (m == n) continue;
        block += factors_[n] * coupling(n, m).cwiseProduct(inner[m]).transpose();
      }
      block *= 2.0;
      out.segment(offset(n), block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
    }
    return out;
  }

  /// Dense H, for small instances only.
  Matrix materialize(Eigen::Index max_size = 60) const {
    if (size_ > max_size)
      throw std::length_error("StructuredHessian::materialize: instance too large");
    Matrix h = Matrix::Zero(size_, size_);
    for (std::size_t n = 0; n < order(); ++n) {
      const Eigen::Index in = dim(n);
      // 2 (A_n (x) I)
      for (Eigen::Index r = 0; r < rank_; ++r)
        for (Eigen::Index s = 0; s < rank_; ++s)
          h.block(offset(n) + r * in, offset(n) + s * in, in, in).diagonal().setConstant(
              2.0 * blocks_[n](s, r));
      // H[(i,r),(j,s)] = 2 U_n(i,s) Omega_nm(r,s) U_m(j,r)
      for (std::size_t m = 0; m < order(); ++m) {
        if (m == n) continue;
        const Matrix omega = coupling(n, m);
        const Matrix& un = factors_[n];
        const Matrix& um = factors_[m];
        const Eigen::Index jm = dim(m);
        for (Eigen::Index s = 0; s < rank_; ++s)
          for (Eigen::Index r = 0; r < rank_; ++r)
            h.block(offset(n) + r * in, offset(m) + s * jm, in, jm) =
                (2.0 * omega(r, s)) * un.col(s) * um.col(r).transpose();
      }
    }
    return h;
  }

  /// Mean of the diagonal of H, the scale for the initial damping.
  double mean_diagonal() const {
    double acc = 0.0;
    for (std::size_t n = 0; n < order(); ++n)
      acc += 2.0 * static_cast<double>(dim(n)) * blocks_[n].diagonal().sum();
    return acc / static_cast<double>(size_);
  }

  Eigen::Map<const Matrix> view(const Vector& v, std::size_t n) const {
    return {v.data() + offset(n), dim(n), rank_};
  }

 private:
  std::vector<Matrix> factors_;
  std::vector<Matrix> grams_;
  std::vector<Matrix> gamma_skip_;
  std::vector<Matrix> blocks_;
  Matrix gamma_;
  double weight_f_ = 1.0;
  double weight_c_ = 0.0;
  Eigen::Index rank_ = 0;
  Eigen::Index size_ = 0;
};

inline StructuredHessian hess_f(std::span<const Matrix> factors) {
  return StructuredHessian(factors, 1.0, 0.0);
}
inline StructuredHessian hess_c(std::span<const Matrix> factors) {
  return StructuredHessian(factors, 0.0, 1.0);
}
inline StructuredHessian hess_lagrangian(std::span<const Matrix> factors, double lambda) {
  return StructuredHessian(factors, 1.0, lambda);
}

// ---------------------------------------------------------------------------
// Literal dense forms of the Hessians, used to cross-check the factored
// representation on small instances. All are scaled to the true Hessians
// (twice the half-objective forms).

namespace forms {

/// 2 (D + 2 V F V') for Hess(f).
inline Matrix hess_f_dvf(std::span<const Matrix> factors) {
  const std::size_t order = factors.size();
  const Eigen::Index rank = factors[0].cols();
  std::vector<Vector> beta;
  for (const auto& u : factors) beta.push_back(u.colwise().squaredNorm().transpose());
  auto beta_skip = [&](std::size_t a, std::size_t b) {
    Vector out = Vector::Ones(rank);
    for (std::size_t k = 0; k < order; ++k)
      if (k != a && k != b) out.array() *= beta[k].array();
    return out;
  };
  Eigen::Index total = 0;
  std::vector<Eigen::Index> off;
  for (const auto& u : factors) {
    off.push_back(total);
    total += u.size();
  }
  Matrix d = Matrix::Zero(total, total);
  Matrix v = Matrix::Zero(total, rank * static_cast<Eigen::Index>(order));
  Matrix f = Matrix::Zero(rank * static_cast<Eigen::Index>(order), rank * static_cast<Eigen::Index>(order));
  for (std::size_t n = 0; n < order; ++n) {
    const Eigen::Index in = factors[n].rows();
    const Vector bn = beta_skip(n, n);
    for (Eigen::Index r = 0; r < rank; ++r) {
      for (Eigen::Index i = 0; i < in; ++i) d(off[n] + i + in * r, off[n] + i + in * r) = bn[r];
      v.block(off[n] + in * r, static_cast<Eigen::Index>(n) * rank + r, in, 1) = factors[n].col(r);
    }
    for (std::size_t m = 0; m < order; ++m) {
      if (m == n) continue;
      f.block(static_cast<Eigen::Index>(n) * rank, static_cast<Eigen::Index>(m) * rank, rank, rank) =
          beta_skip(n, m).asDiagonal();
    }
  }
  return 2.0 * (d + 2.0 * v * f * v.transpose());
}

/// 2 (blkdiag(diag(beta_{-n} (x) 1) - 2 V~_n diag(beta) V~_n') + 2 V~ diag(beta) V~').
inline Matrix hess_f_rank_r(std::span<const Matrix> factors) {
  const std::size_t order = factors.size();
  const Eigen::Index rank = factors[0].cols();
  std::vector<Vector> beta_n;
  Vector beta = Vector::Ones(rank);
  for (const auto& u : factors) {
    beta_n.push_back(u.colwise().squaredNorm().transpose());
    beta.array() *= beta_n.back().array();
  }
  Eigen::Index total = 0;
  std::vector<Eigen::Index> off;
  for (const auto& u : factors) {
    off.push_back(total);
    total += u.size();
  }
  Matrix vt = Matrix::Zero(total, rank);
  Matrix blk = Matrix::Zero(total, total);
  for (std::size_t n = 0; n < order; ++n) {
    const Eigen::Index in = factors[n].rows();
    Matrix vn = Matrix::Zero(in * rank, rank);
    for (Eigen::Index r = 0; r < rank; ++r)
      vn.block(in * r, r, in, 1) = factors[n].col(r) / beta_n[n][r];
    vt.middleRows(off[n], in * rank) = vn;
    const Vector bskip = beta.cwiseQuotient(beta_n[n]);
    Matrix dn = Matrix::Zero(in * rank, in * rank);
    for (Eigen::Index r = 0; r < rank; ++r)
      dn.block(in * r, in * r, in, in).diagonal().setConstant(bskip[r]);
    blk.block(off[n], off[n], in * rank, in * rank) =
        dn - 2.0 * vn * beta.asDiagonal() * vn.transpose();
  }
  return 2.0 * (blk + 2.0 * vt * beta.asDiagonal() * vt.transpose());
}

/// 2 (G + Z K Z') for J'J(c) with Z = blkdiag(I_R (x) U^(n)),
/// K_nm = P_{R,R} dvec(Gamma_{-(n,m)}).
inline Matrix hess_c_gzkz(std::span<const Matrix> factors) {
  const StructuredHessian h(factors, 0.0, 1.0);
  const std::size_t order = factors.size();
  const Eigen::Index rank = factors[0].cols();
  const Eigen::Index r2 = rank * rank;
  const Matrix p = perm_matrix_rr(rank);
  Matrix g = Matrix::Zero(h.size(), h.size());
  Matrix z = Matrix::Zero(h.size(), r2 * static_cast<Eigen::Index>(order));
  Matrix k = Matrix::Zero(z.cols(), z.cols());
  for (std::size_t n = 0; n < order; ++n) {
    const Eigen::Index in = h.dim(n);
    g.block(h.offset(n), h.offset(n), in * rank, in * rank) =
        kron(h.gamma_skip(n), Matrix::Identity(in, in));
    z.block(h.offset(n), static_cast<Eigen::Index>(n) * r2, in * rank, r2) =
        kron(Matrix::Identity(rank, rank), factors[n]);
    for (std::size_t m = 0; m < order; ++m) {
      if (m == n) continue;
      k.block(static_cast<Eigen::Index>(n) * r2, static_cast<Eigen::Index>(m) * r2, r2, r2) =
          p * dvec(h.gamma_skip2(n, m));
    }
  }
  return 2.0 * (g + z * k * z.transpose());
}

/// Z~_n = (I_R (x) U^(n)) dvec(1 ./ Gamma_n).
inline Matrix z_tilde(const Matrix& u, const Matrix& gram) {
  const Eigen::Index rank = u.cols();
  return kron(Matrix::Identity(rank, rank), u) * dvec(gram.cwiseInverse());
}

/// 2 (blkdiag(A_n (x) I - Z~_n Psi Z~_n') + Z~ Psi Z~'), Psi = P dvec(Gamma_w).
/// Requires every Gram entry to be nonzero.
inline Matrix hess_ztilde_psi(const StructuredHessian& h) {
  const Eigen::Index rank = h.rank();
  const Matrix psi = perm_matrix_rr(rank) * dvec(h.core_gamma());
  Matrix zt(h.size(), rank * rank);
  Matrix blk = Matrix::Zero(h.size(), h.size());
  for (std::size_t n = 0; n < h.order(); ++n) {
    const Eigen::Index in = h.dim(n);
    const Matrix zn = z_tilde(h.factors()[n], h.gram(n));
    zt.middleRows(h.offset(n), in * rank) = zn;
    blk.block(h.offset(n), h.offset(n), in * rank, in * rank) =
        kron(h.block_core(n), Matrix::Identity(in, in)) - zn * psi * zn.transpose();
  }
  return 2.0 * (blk + zt * psi * zt.transpose());
}

}  // namespace forms

// ---------------------------------------------------------------------------
// Damped inverse

/// (H + mu I)^{-1}, factored once and applied to any number of vectors.
///
/// Two exact routes are available:
///  * kRankR2 follows the rank-R^2 adjustment form: per-mode blocks
///    A_n (x) I - Z~_n Psi Z~_n' are inverted (by a small R^2 x R^2 Woodbury
///    step when R < I_n, densely otherwise) and one R^2 x R^2 Woodbury
///    correction couples the modes. It divides by Gram entries, so it is only
///    used when all of them are safely nonzero.
///  * kCoupled writes the coupling as Z K Z' with Z = blkdiag(I_R (x) U^(n))
///    and needs no division; its inner system is N R^2 x N R^2.
/// Both use the multiplier-free Woodbury form (I + K Z' B^-1 Z)^-1 K so a
/// singular core (e.g. the weight on c is zero) is not a problem.
class DampedInverse {
 public:
  /// kDense factors the materialized matrix; automatic selection uses it
  /// when theta is no longer than the structured route's inner system.
  enum class Route { kRankR2, kCoupled, kDense };

  DampedInverse(const StructuredHessian& h, double mu, std::optional<Route> force = std::nullopt)
      : h_(&h), mu_(mu) {
    if (!(mu >= 0.0) || !std::isfinite(mu))
      throw std::invalid_argument("DampedInverse: damping must be a nonnegative number");
    const bool r2_auto = !force && rank_r2_applicable();
    if (force ? *force == Route::kDense : h.size() <= inner_size(r2_auto)) {
      build_dense();
      return;
    }
    const double half_mu = 0.5 * mu;
    for (std::size_t n = 0; n < h.order(); ++n) {
      Matrix b = h.block_core(n);
      b.diagonal().array() += half_mu;
      Eigen::LLT<Matrix> llt(b);
      if (llt.info() != Eigen::Success)
        throw DampingTooSmall("DampedInverse: per-mode block is not positive definite");
      phi_.push_back(llt.solve(Matrix::Identity(b.rows(), b.cols())));
    }
    const bool r2_ok = force ? *force == Route::kRankR2 : r2_auto;
    if (r2_ok) {
      route_ = Route::kRankR2;
      if (!build_rank_r2() || (!force && !verify())) {
        if (force) throw DampingTooSmall("DampedInverse: rank-R^2 route is singular");
        if (h.size() <= inner_size(false)) {
          build_dense();
          return;
        }
        route_ = Route::kCoupled;
      }
    } else {
      route_ = Route::kCoupled;
    }
    if (route_ == Route::kCoupled && !build_coupled())
      throw DampingTooSmall("DampedInverse: coupled inner system is singular");
  }

  Route route() const { return route_; }
  double mu() const { return mu_; }

  Vector apply(const Vector& v) const {
    if (v.size() != h_->size()) throw ShapeError("DampedInverse::apply: size mismatch");
    switch (route_) {
      case Route::kRankR2:
        return apply_rank_r2(v);
      case Route::kCoupled:
        return apply_coupled(v);
      case Route::kDense:
        break;
    }
    return dense_lu_.solve(v);
  }

 private:
  void build_dense() {
    route_ = Route::kDense;
    Matrix dense = h_->materialize(h_->size());
    dense.diagonal().array() += mu_;
    dense_lu_.compute(dense);
    if (!invertible(dense_lu_)) throw DampingTooSmall("DampedInverse: damped Hessian is singular");
  }

  Eigen::Index inner_size(bool rank_r2) const {
    const Eigen::Index r2 = h_->rank() * h_->rank();
    return rank_r2 ? r2 : static_cast<Eigen::Index>(h_->order()) * r2;
  }

  // Gram entries relative to the geometric mean of the diagonal.
  bool rank_r2_applicable() const {
    for (std::size_t n = 0; n < h_->order(); ++n) {
      const Matrix& g = h_->gram(n);
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) {
          const double scale = std::sqrt(g(i, i) * g(j, j));
          if (!(scale > 0.0) || std::abs(g(i, j)) < 1e-3 * scale) return false;
        }
    }
    return true;
  }

  bool verify() const {
    const Vector probe = Vector::LinSpaced(h_->size(), 1.0, 2.0);
    const Vector x = apply_rank_r2(probe);
    if (!x.allFinite()) return false;
    const Vector back = h_->apply(x) + mu_ * x;
    return (back - probe).norm() <= 1e-9 * probe.norm();
  }

  static bool invertible(const Eigen::PartialPivLU<Matrix>& lu) {
    const double rc = lu.rcond();
    return std::isfinite(rc) && rc > 1e3 * std::numeric_limits<double>::epsilon();
  }

  // -- rank-R^2 route --------------------------------------------------------

  // (G~_n + mu/2 I)^{-1} applied to the columns of x (I_n R rows).
  Matrix block_inverse(std::size_t n, const Matrix& x) const {
    const Eigen::Index in = h_->dim(n);
    const Eigen::Index rank = h_->rank();
    const auto& blk = blocks_[n];
    if (blk.dense) return blk.dense_lu.solve(x);
    const Matrix& u = h_->factors()[n];
    const Matrix& phi = phi_[n];
    Matrix out(x.rows(), x.cols());
    Matrix w(rank * rank, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Eigen::Map<const Matrix> xj(x.col(j).data(), in, rank);
      const Matrix bx = xj * phi;  // (Phi (x) I) x
      Eigen::Map<Matrix>(out.col(j).data(), in, rank) = bx;
      const Matrix t = u.transpose() * bx;  // (I (x) U') applied, R x R
      w.col(j) = Eigen::Map<const Vector>(t.data(), t.size()).cwiseProduct(blk.inv_gram);
    }
    const Matrix s = blk.inner_lu.solve(perm_dvec_apply(core_, w));
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Matrix sj = Eigen::Map<const Matrix>(s.col(j).data(), rank, rank);
      sj.array() *= Eigen::Map<const Matrix>(blk.inv_gram.data(), rank, rank).array();
      Eigen::Map<Matrix>(out.col(j).data(), in, rank) += u * sj * phi;
    }
    return out;
  }

  // Z~_n applied to the columns of y (R^2 rows).
  Matrix z_tilde_apply(std::size_t n, const Matrix& y) const {
    const Eigen::Index rank = h_->rank();
    const Matrix& u = h_->factors()[n];
    Matrix out(h_->dim(n) * rank, y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      Matrix yj = Eigen::Map<const Matrix>(y.col(j).data(), rank, rank);
      yj.array() /= h_->gram(n).array();
      const Matrix uy = u * yj;
      out.col(j) = Eigen::Map<const Vector>(uy.data(), uy.size());
    }
    return out;
  }

  // Z~_n' applied to the columns of x (I_n R rows).
  Matrix z_tilde_t_apply(std::size_t n, const Matrix& x) const {
    const Eigen::Index rank = h_->rank();
    const Matrix& u = h_->factors()[n];
    Matrix out(rank * rank, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Eigen::Map<const Matrix> xj(x.col(j).data(), h_->dim(n), rank);
      Matrix t = u.transpose() * xj;
      t.array() /= h_->gram(n).array();
      out.col(j) = Eigen::Map<const Vector>(t.data(), t.size());
    }
    return out;
  }

  bool build_rank_r2() {
    const Eigen::Index rank = h_->rank();
    const Eigen::Index r2 = rank * rank;
    const double half_mu = 0.5 * mu_;
    core_ = h_->core_gamma();
    blocks_.assign(h_->order(), {});
    for (std::size_t n = 0; n < h_->order(); ++n) {
      auto& blk = blocks_[n];
      const Eigen::Index in = h_->dim(n);
      blk.inv_gram = Eigen::Map<const Vector>(h_->gram(n).data(), r2).cwiseInverse();
      if (rank >= in) {
        // Dense (A_n + mu/2) (x) I - Z~_n Psi Z~_n'.
        blk.dense = true;
        const Matrix zn = forms::z_tilde(h_->factors()[n], h_->gram(n));
        Matrix g = kron(h_->block_core(n), Matrix::Identity(in, in)) -
                   zn * perm_dvec_apply(core_, zn.transpose());
        g.diagonal().array() += half_mu;
        blk.dense_lu.compute(g);
        if (!invertible(blk.dense_lu)) return false;
      } else {
        // I - Psi D (Phi (x) Gamma_n) D
        Matrix m = kron(phi_[n], h_->gram(n));
        m = blk.inv_gram.asDiagonal() * m * blk.inv_gram.asDiagonal();
        Matrix inner = -perm_dvec_apply(core_, m);
        inner.diagonal().array() += 1.0;
        blk.inner_lu.compute(inner);
        if (!invertible(blk.inner_lu)) return false;
      }
    }
    // G~^{-1} Z~ and the outer R^2 x R^2 system I + Psi Z~' G~^{-1} Z~.
    const Matrix eye = Matrix::Identity(r2, r2);
    gz_.resize(h_->size(), r2);
    Matrix ztgz = Matrix::Zero(r2, r2);
    for (std::size_t n = 0; n < h_->order(); ++n) {
      const Matrix gzn = block_inverse(n, z_tilde_apply(n, eye));
      gz_.middleRows(h_->offset(n), gzn.rows()) = gzn;
      ztgz += z_tilde_t_apply(n, gzn);
    }
    Matrix outer = perm_dvec_apply(core_, ztgz);
    outer.diagonal().array() += 1.0;
    outer_lu_.compute(outer);
    return invertible(outer_lu_);
  }

  Vector apply_rank_r2(const Vector& v) const {
    const Eigen::Index r2 = h_->rank() * h_->rank();
    // The factor 1/2 turns (H_half + mu/2)^{-1} into (2 H_half + mu)^{-1}.
    Vector y(v.size());
    Vector t = Vector::Zero(r2);
    for (std::size_t n = 0; n < h_->order(); ++n) {
      const Eigen::Index len = h_->dim(n) * h_->rank();
      const Matrix yn = block_inverse(n, v.segment(h_->offset(n), len));
      y.segment(h_->offset(n), len) = yn.col(0);
      t += z_tilde_t_apply(n, yn).col(0);
    }
    const Vector s = outer_lu_.solve(perm_dvec_apply(core_, t));
    return 0.5 * (y - gz_ * s);
  }

  // -- coupled route ---------------------------------------------------------

  bool build_coupled() {
    const std::size_t order = h_->order();
    const Eigen::Index rank = h_->rank();
    const Eigen::Index r2 = rank * rank;
    const auto total = static_cast<Eigen::Index>(order) * r2;
    couplings_.assign(order * order, Matrix());
    for (std::size_t n = 0; n < order; ++n)
      for (std::size_t m = 0; m < order; ++m)
        if (m != n) couplings_[n * order + m] = h_->coupling(n, m);
    // I + K blkdiag(Phi_m (x) Gamma_m)
    Matrix inner = Matrix::Identity(total, total);
    for (std::size_t m = 0; m < order; ++m) {
      const Matrix pg = kron(phi_[m], h_->gram(m));
      for (std::size_t n = 0; n < order; ++n) {
        if (n == m) continue;
        inner.block(static_cast<Eigen::Index>(n) * r2, static_cast<Eigen::Index>(m) * r2, r2, r2) +=
            perm_dvec_apply(couplings_[n * order + m], pg);
      }
    }
    coupled_lu_.compute(inner);
    return invertible(coupled_lu_);
  }

  Vector apply_coupled(const Vector& v) const {
    const std::size_t order = h_->order();
    const Eigen::Index rank = h_->rank();
    const Eigen::Index r2 = rank * rank;
    Vector y(v.size());
    Vector w(static_cast<Eigen::Index>(order) * r2);
    for (std::size_t n = 0; n < order; ++n) {
      const Matrix yn = h_->view(v, n) * phi_[n];
      y.segment(h_->offset(n), yn.size()) = Eigen::Map<const Vector>(yn.data(), yn.size());
      const Matrix zy = h_->factors()[n].transpose() * yn;
      w.segment(static_cast<Eigen::Index>(n) * r2, r2) = Eigen::Map<const Vector>(zy.data(), r2);
    }
    Vector kw = Vector::Zero(w.size());
    for (std::size_t n = 0; n < order; ++n)
      for (std::size_t m = 0; m < order; ++m) {
        if (m == n) continue;
        kw.segment(static_cast<Eigen::Index>(n) * r2, r2) +=
            perm_dvec_apply(couplings_[n * order + m], w.segment(static_cast<Eigen::Index>(m) * r2, r2));
      }
    const Vector s = coupled_lu_.solve(kw);
    Vector out = y;
    for (std::size_t n = 0; n < order; ++n) {
      const Matrix sn = Eigen::Map<const Matrix>(s.data() + static_cast<Eigen::Index>(n) * r2, rank, rank);
      const Matrix corr = h_->factors()[n] * sn * phi_[n];
      out.segment(h_->offset(n), corr.size()) -= Eigen::Map<const Vector>(corr.data(), corr.size());
    }
    return 0.5 * out;
  }

  struct Block {
    bool dense = false;
    Vector inv_gram;  // vec(1 ./ Gamma_n)
    Eigen::PartialPivLU<Matrix> dense_lu;
    Eigen::PartialPivLU<Matrix> inner_lu;
  };

  const StructuredHessian* h_;
  double mu_;
  Route route_ = Route::kCoupled;
  std::vector<Matrix> phi_;  // (A_n + mu/2 I)^{-1}
  Matrix core_;
  std::vector<Block> blocks_;
  Matrix gz_;
  Eigen::PartialPivLU<Matrix> outer_lu_;
  std::vector<Matrix> couplings_;
  Eigen::PartialPivLU<Matrix> coupled_lu_;
  Eigen::PartialPivLU<Matrix> dense_lu_;
};

inline Vector inv_damped_hessian_apply(const StructuredHessian& h, double mu, const Vector& v) {
  return DampedInverse(h, mu).apply(v);
}

struct KktStep {
  Vector d_theta;
  double lambda = 0.0;
};

/// Closed-form solution of the bordered system
///     [H  g_con; g_con' 0] [d; lambda] = -[g_obj; residual]
/// given any routine applying H^{-1}.
template <class ApplyInverse>
  requires std::invocable<const ApplyInverse&, const Vector&>
KktStep solve_kkt_system(const ApplyInverse& apply_inverse, const Vector& g_obj,
                         const Vector& g_con, double residual) {
  if (g_obj.size() != g_con.size()) throw ShapeError("solve_kkt_system: gradient sizes differ");
  const Vector h_con = apply_inverse(g_con);
  const Vector h_obj = apply_inverse(g_obj);
  const double curvature = g_con.dot(h_con);
  if (!(curvature > 0.0) || !std::isfinite(curvature))
    throw DampingTooSmall("solve_kkt_system: no curvature along the constraint gradient");
  KktStep step;
  step.lambda = (residual - g_con.dot(h_obj)) / curvature;
  step.d_theta = -(h_obj + step.lambda * h_con);
  if (!step.d_theta.allFinite() || !std::isfinite(step.lambda))
    throw DampingTooSmall("solve_kkt_system: non-finite step");
  return step;
}

inline KktStep solve_kkt_system(const DampedInverse& inv, const Vector& g_obj,
                                const Vector& g_con, double residual) {
  return solve_kkt_system([&inv](const Vector& v) { return inv.apply(v); }, g_obj, g_con,
                          residual);
}

inline KktStep solve_kkt_system(const StructuredHessian& h, double mu, const Vector& g_obj,
                                const Vector& g_con, double residual) {
  return solve_kkt_system(DampedInverse(h, mu), g_obj, g_con, residual);
}

/// Levenberg-Marquardt style damping schedule.
struct DampingPolicy {
  double initial_factor = 1e-4;  ///< mu_0 = factor * mean(diag(H))
  double increase = 10.0;
  double decrease = 3.0;
  double max_ratio = 1e12;  ///< give up once mu > max_ratio * mu_0
  double min_ratio = 1e-15;  ///< mu never drops below min_ratio * mu_0

  double initial(const StructuredHessian& h) const {
    const double d = h.mean_diagonal();
    return initial_factor * (d > 0.0 && std::isfinite(d) ? d : 1.0);
  }
};

}  // namespace epc::calculus
