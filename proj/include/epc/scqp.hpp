#pragma once

// Closed-form solvers for quadratic programs over spheres and balls.
//
// Every solver here uses one convention:
//     minimize 0.5 * z' diag(s) z + c' z   subject to ||z|| = radius (or <=).
// Forms such as  z' S z - 2 c' z  are mapped onto it with c <- -c and a
// positive rescaling of the objective, neither of which moves the minimizer.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "epc/error.hpp"
#include "epc/tensor.hpp"

namespace epc::scqp {

struct ScqpProblem {
  Vector s;             ///< diagonal of the quadratic term
  Vector c;             ///< linear term
  double radius = 1.0;  ///< sphere/ball radius, > 0
};

struct SphereSolution {
  Vector z;
  /// KKT multiplier: (diag(s) + lambda I) z = -c.
  double lambda = 0.0;
  /// The linear term vanished on the smallest-eigenvalue subspace and the
  /// minimizer is not unique; the free part was placed on +e_first.
  bool hard_case = false;
};

inline double objective(const ScqpProblem& p, const Vector& z) {
  return 0.5 * z.dot(p.s.cwiseProduct(z)) + p.c.dot(z);
}

/// Relative tolerance used to decide that two diagonal entries coincide.
inline constexpr double kEigenGroupTol = 1e-12;

inline bool same_eigenvalue(double a, double b) {
  return std::abs(a - b) <= kEigenGroupTol * std::max(1.0, std::abs(b));
}

inline void validate(const ScqpProblem& p) {
  if (p.s.size() < 1) throw ShapeError("scqp: empty problem");
  if (p.s.size() != p.c.size()) throw ShapeError("scqp: s and c lengths differ");
  if (!p.s.allFinite() || !p.c.allFinite() || !std::isfinite(p.radius))
    throw NonFiniteError("scqp: non-finite input");
  if (!(p.radius > 0.0)) throw std::invalid_argument("scqp: radius must be positive");
}

namespace detail {

inline std::vector<Eigen::Index> ascending_order(const Vector& s) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(s.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return s[a] < s[b]; });
  return order;
}

/// Root t > 0 of sum_i c_i^2 / (d_i + t)^2 = r^2 with d_i >= 0. Safeguarded
/// Newton on 1/sqrt(q(t)) - 1/r, which is increasing and close to linear.
inline double secular_root(const Vector& d, const Vector& c, double radius) {
  const double r2 = radius * radius;
  auto q = [&](double t) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (c[i] == 0.0) continue;
      const double den = d[i] + t;
      acc += (c[i] * c[i]) / (den * den);
    }
    return acc;
  };
  double lo = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i)
    lo = std::max(lo, std::abs(c[i]) / radius - d[i]);
  double hi = c.norm() / radius;
  if (hi <= lo) return hi;

  double t = hi;
  for (int it = 0; it < 500; ++it) {
    const double qt = q(t);
    if (std::abs(qt - r2) <= 1e-13 * r2) return t;
    if (qt > r2)
      lo = std::max(lo, t);
    else
      hi = std::min(hi, t);
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) return 0.5 * (lo + hi);

    double next = 0.5 * (lo + hi);
    if (t > 0.0 && std::isfinite(qt) && qt > 0.0) {
      double dq = 0.0;  // -0.5 * q'(t)
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (c[i] == 0.0) continue;
        const double den = d[i] + t;
        dq += (c[i] * c[i]) / (den * den * den);
      }
      const double phi = 1.0 / std::sqrt(qt) - 1.0 / radius;
      const double dphi = dq / (qt * std::sqrt(qt));
      if (dphi > 0.0) {
        const double cand = t - phi / dphi;
        if (cand > lo && cand < hi) next = cand;
      }
    }
    t = next;
  }
  return t;
}

}  // namespace detail

/// Global minimizer of 0.5 z' diag(s) z + c' z on ||z|| = radius. The
/// entries of s may come in any order.
inline SphereSolution solve_sphere(const ScqpProblem& p) {
  validate(p);
  const Eigen::Index k = p.s.size();
  const auto order = detail::ascending_order(p.s);
  const double s_min = p.s[order[0]];

  Vector d(k);
  for (Eigen::Index i = 0; i < k; ++i) d[i] = p.s[i] - s_min;

  std::vector<Eigen::Index> bottom;  // indices of the smallest-eigenvalue group
  for (auto i : order)
    if (same_eigenvalue(p.s[i], s_min)) bottom.push_back(i);
  double bottom_c = 0.0;
  for (auto i : bottom) bottom_c += p.c[i] * p.c[i];
  bottom_c = std::sqrt(bottom_c);

  SphereSolution sol;
  sol.z = Vector::Zero(k);
  const double c_norm = p.c.norm();

  if (bottom_c <= 1e-14 * c_norm || c_norm == 0.0) {
    // Candidate hard case: lambda = -s_min when the rest fits in the sphere.
    Vector c_rest = p.c;
    for (auto i : bottom) {
      c_rest[i] = 0.0;
      d[i] = 0.0;
    }
    double d2 = 0.0;
    for (Eigen::Index i = 0; i < k; ++i)
      if (c_rest[i] != 0.0) d2 += (c_rest[i] * c_rest[i]) / (d[i] * d[i]);
    const double r2 = p.radius * p.radius;
    if (d2 <= r2) {
      for (Eigen::Index i = 0; i < k; ++i)
        if (c_rest[i] != 0.0) sol.z[i] = -c_rest[i] / d[i];
      const Eigen::Index first = *std::min_element(bottom.begin(), bottom.end());
      sol.z[first] = std::sqrt(std::max(0.0, r2 - d2));
      sol.lambda = -s_min;
      sol.hard_case = true;
      return sol;
    }
    const double t = detail::secular_root(d, c_rest, p.radius);
    for (Eigen::Index i = 0; i < k; ++i) sol.z[i] = -c_rest[i] / (d[i] + t);
    sol.lambda = t - s_min;
  } else {
    for (auto i : bottom) d[i] = 0.0;
    const double t = detail::secular_root(d, p.c, p.radius);
    for (Eigen::Index i = 0; i < k; ++i) sol.z[i] = -p.c[i] / (d[i] + t);
    sol.lambda = t - s_min;
  }
  const double zn = sol.z.norm();
  if (zn > 0.0) sol.z *= p.radius / zn;
  return sol;
}

/// Minimizer over the ball ||z|| <= radius for strictly positive s.
inline SphereSolution solve_ball(const ScqpProblem& p) {
  validate(p);
  if ((p.s.array() <= 0.0).any())
    throw std::invalid_argument("solve_ball: quadratic coefficients must be positive");
  SphereSolution sol;
  sol.z = -p.c.cwiseQuotient(p.s);
  if (sol.z.norm() <= p.radius) return sol;
  sol = solve_sphere(p);
  sol.lambda = std::max(sol.lambda, 0.0);
  return sol;
}

/// Rescaled copy of a sphere problem with s_1 = 1, ||c|| = 1 (when c != 0)
/// and unit radius. A canonical solution z' maps back as z = radius * z'.
struct CanonicalForm {
  ScqpProblem problem;
  double radius = 1.0;
  double scale = 1.0;  ///< positive factor applied to the objective
  double shift = 0.0;  ///< added to every s after scaling by radius^2

  Vector to_original(const Vector& z_canonical) const { return radius * z_canonical; }
};

inline CanonicalForm to_canonical(const ScqpProblem& p) {
  validate(p);
  CanonicalForm f;
  f.radius = p.radius;
  // z = r z'  =>  r^2 [0.5 z' S z' + (c/r)' z'] ; drop r^2.
  Vector c = p.c / p.radius;
  const double c_norm = c.norm();
  f.scale = c_norm > 0.0 ? 1.0 / c_norm : 1.0;
  Vector s = p.s * f.scale;
  f.shift = 1.0 - s.minCoeff();
  // A constant shift of s changes the objective by 0.5*shift on the unit sphere.
  s.array() += f.shift;
  f.problem = ScqpProblem{s, c * f.scale, 1.0};
  return f;
}

/// Identical-eigenvalue reduction: entries with equal s are merged and each
/// group's linear coefficients are replaced by their norm.
class Reduction {
 public:
  explicit Reduction(const ScqpProblem& p) : original_(p) {
    validate(p);
    const auto order = detail::ascending_order(p.s);
    for (auto i : order) {
      if (groups_.empty() || !same_eigenvalue(p.s[i], p.s[groups_.back().front()]))
        groups_.push_back({i});
      else
        groups_.back().push_back(i);
    }
    const auto j = static_cast<Eigen::Index>(groups_.size());
    reduced_.s.resize(j);
    reduced_.c.resize(j);
    reduced_.radius = p.radius;
    for (Eigen::Index g = 0; g < j; ++g) {
      const auto& idx = groups_[static_cast<std::size_t>(g)];
      reduced_.s[g] = p.s[idx.front()];
      if (idx.size() == 1) {
        reduced_.c[g] = p.c[idx.front()];
      } else {
        double acc = 0.0;
        for (auto i : idx) acc += p.c[i] * p.c[i];
        reduced_.c[g] = std::sqrt(acc);
      }
    }
  }

  const ScqpProblem& reduced() const { return reduced_; }
  const std::vector<std::vector<Eigen::Index>>& groups() const { return groups_; }
  bool is_identity() const {
    return static_cast<Eigen::Index>(groups_.size()) == original_.s.size();
  }

  /// Maps a minimizer of the reduced problem to one of the original.
  Vector expand(const Vector& z) const {
    Vector x = Vector::Zero(original_.s.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& idx = groups_[g];
      const double zg = z[static_cast<Eigen::Index>(g)];
      const double cg = reduced_.c[static_cast<Eigen::Index>(g)];
      if (cg != 0.0) {
        for (auto i : idx) x[i] = (zg / cg) * original_.c[i];
      } else {
        // Free direction inside the group: +e_first.
        x[*std::min_element(idx.begin(), idx.end())] = zg;
      }
    }
    return x;
  }

 private:
  ScqpProblem original_;
  ScqpProblem reduced_;
  std::vector<std::vector<Eigen::Index>> groups_;
};

inline Reduction reduce_identical(const ScqpProblem& p) { return Reduction(p); }

struct MatrixSphereSolution {
  Matrix x;
  double lambda = 0.0;
};

/// minimize 0.5 tr(X' Q X) + tr(B' X)  s.t. ||X||_F = radius, Q symmetric psd.
inline MatrixSphereSolution solve_matrix_sphere(const Matrix& q, const Matrix& b,
                                                double radius) {
  if (q.rows() != q.cols() || q.rows() != b.rows())
    throw ShapeError("solve_matrix_sphere: Q must be K x K and B K x R");
  if (!q.allFinite() || !b.allFinite()) throw NonFiniteError("solve_matrix_sphere: non-finite input");
  if ((q - q.transpose()).norm() > 1e-10 * std::max(1.0, q.norm()))
    throw std::invalid_argument("solve_matrix_sphere: Q is not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> eig(q);
  const Matrix& basis = eig.eigenvectors();
  const Matrix rotated = basis.transpose() * b;  // row i = (B' u_i)'
  ScqpProblem reduced{eig.eigenvalues(), rotated.rowwise().norm(), radius};
  const SphereSolution zs = solve_sphere(reduced);

  Matrix w = Matrix::Zero(b.rows(), b.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    if (reduced.c[i] != 0.0)
      w.row(i) = (zs.z[i] / reduced.c[i]) * rotated.row(i);
    else if (w.cols() > 0)
      w(i, 0) = zs.z[i];
  }
  return {basis * w, zs.lambda};
}

struct BoundedRegression {
  Matrix a;
  Vector y;
  double delta = 0.0;
};

/// Minimum-norm x with ||y - A x|| <= delta. Rank-deficient A is handled in
/// the compressed column space. Throws InfeasibleError below the
/// least-squares residual.
inline Vector solve_bounded_regression(const BoundedRegression& p) {
  if (p.a.rows() != p.y.size()) throw ShapeError("bounded regression: A and y disagree");
  if (!(p.delta >= 0.0) || !std::isfinite(p.delta))
    throw std::invalid_argument("bounded regression: delta must be a nonnegative number");
  const Eigen::Index k = p.a.cols();
  if (p.delta >= p.y.norm()) return Vector::Zero(k);

  Eigen::BDCSVD<Matrix> svd(p.a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double tol = (sv.size() ? sv[0] : 0.0) *
                     static_cast<double>(std::max(p.a.rows(), p.a.cols())) *
                     std::numeric_limits<double>::epsilon();
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv[rank] > tol) ++rank;

  const Matrix u = svd.matrixU().leftCols(rank);
  const Matrix v = svd.matrixV().leftCols(rank);
  const Vector s = sv.head(rank);
  const Vector y_hat = u.transpose() * p.y;
  const double perp = (p.y - u * y_hat).norm();
  if (p.delta < perp * (1.0 - 1e-14))
    throw InfeasibleError("bounded regression: delta below the least-squares residual");
  if (rank == 0) return Vector::Zero(k);

  const double delta_hat = std::sqrt(std::max(0.0, p.delta * p.delta - perp * perp));
  const Vector inv_s2 = s.array().square().inverse();
  if (delta_hat == 0.0) return v * y_hat.cwiseQuotient(s);

  // z = (y_hat - diag(s) V' x) / delta_hat lives on the unit sphere.
  ScqpProblem sphere{delta_hat * inv_s2, -y_hat.cwiseProduct(inv_s2), 1.0};
  const Vector z = solve_sphere(sphere).z;
  return v * (y_hat - delta_hat * z).cwiseQuotient(s);
}

}  // namespace epc::scqp
