#pragma once

// Dense tensors, Kruskal (CP) models and the multilinear kernels shared by
// every decomposition algorithm in the library.
//
// Layout: the first index varies fastest. The mode-n unfolding puts i_n on
// the rows and the remaining indices, in increasing mode order (lowest mode
// fastest), on the columns. khatri_rao_skip() multiplies the factors in
// decreasing mode order so that unfold(reconstruct(m), n) == U_eta^(n) T_n^T.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "epc/error.hpp"

namespace epc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_to_string(const Shape& shape) {
  std::string s;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) s += "x";
    s += std::to_string(shape[k]);
  }
  return s;
}

class DenseTensor {
 public:
  DenseTensor() = default;

  /// Zero tensor of the given shape.
  explicit DenseTensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Vector::Zero(static_cast<Eigen::Index>(shape_numel(shape_)));
  }

  DenseTensor(Shape shape, Vector data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<std::size_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    if (!data_.allFinite()) throw NonFiniteError("tensor data contains NaN/Inf");
  }

  const Shape& shape() const { return shape_; }
  std::size_t order() const { return shape_.size(); }
  std::size_t dim(std::size_t n) const { return shape_.at(n); }
  std::size_t numel() const { return static_cast<std::size_t>(data_.size()); }
  const Vector& data() const { return data_; }

  double norm() const { return data_.norm(); }
  double squared_norm() const { return data_.squaredNorm(); }

  std::size_t linear_index(std::span<const std::size_t> idx) const {
    std::size_t lin = 0;
    std::size_t stride = 1;
    for (std::size_t k = 0; k < shape_.size(); ++k) {
      lin += idx[k] * stride;
      stride *= shape_[k];
    }
    return lin;
  }

  double operator()(std::span<const std::size_t> idx) const {
    return data_[static_cast<Eigen::Index>(linear_index(idx))];
  }

  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor order must be at least 1");
    for (auto d : shape_)
      if (d == 0) throw ShapeError("tensor extents must be positive");
  }

  Shape shape_;
  Vector data_;
};

/// eta and N factor matrices; Y_hat = sum_r eta_r u_r^(1) o ... o u_r^(N).
struct KruskalModel {
  Vector weights;
  std::vector<Matrix> factors;

  KruskalModel() = default;
  KruskalModel(Vector w, std::vector<Matrix> f)
      : weights(std::move(w)), factors(std::move(f)) {
    validate();
  }

  std::size_t rank() const { return static_cast<std::size_t>(weights.size()); }
  std::size_t order() const { return factors.size(); }

  Shape shape() const {
    Shape s;
    s.reserve(factors.size());
    for (const auto& f : factors) s.push_back(static_cast<std::size_t>(f.rows()));
    return s;
  }

  void validate() const {
    if (factors.empty()) throw ShapeError("model needs at least one factor");
    if (weights.size() < 1) throw ShapeError("model rank must be at least 1");
    for (const auto& f : factors) {
      if (f.cols() != weights.size())
        throw ShapeError("factor column count does not match rank");
      if (f.rows() < 1) throw ShapeError("factor with zero rows");
    }
  }

  /// sum_r eta_r^2 prod_n ||u_r^(n)||^2, i.e. the squared norms of the
  /// rank-1 terms for whatever internal scaling the model is in.
  double rank1_squared_norm() const {
    double total = 0.0;
    for (Eigen::Index r = 0; r < weights.size(); ++r) {
      double t = weights[r] * weights[r];
      for (const auto& f : factors) t *= f.col(r).squaredNorm();
      total += t;
    }
    return total;
  }
};

inline void check_mode(std::size_t order, std::size_t mode) {
  if (mode >= order)
    throw ShapeError("mode " + std::to_string(mode) + " out of range for order " +
                     std::to_string(order));
}

inline void check_compatible(const DenseTensor& t, const KruskalModel& m) {
  if (t.shape() != m.shape())
    throw ShapeError("tensor shape " + shape_to_string(t.shape()) +
                     " does not match model shape " + shape_to_string(m.shape()));
}

/// Mode-n matricization (I_n x prod_{k != n} I_k).
inline Matrix unfold(const DenseTensor& t, std::size_t mode) {
  check_mode(t.order(), mode);
  const auto& shape = t.shape();
  std::size_t left = 1, right = 1;
  for (std::size_t k = 0; k < mode; ++k) left *= shape[k];
  for (std::size_t k = mode + 1; k < shape.size(); ++k) right *= shape[k];
  const std::size_t rows = shape[mode];
  Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(left * right));
  const double* src = t.data().data();
  for (std::size_t q = 0; q < right; ++q)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t l = 0; l < left; ++l)
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l + left * q)) =
            src[l + left * (i + rows * q)];
  return out;
}

/// Inverse of unfold().
inline DenseTensor fold(const Matrix& unfolded, std::size_t mode, const Shape& shape) {
  check_mode(shape.size(), mode);
  std::size_t left = 1, right = 1;
  for (std::size_t k = 0; k < mode; ++k) left *= shape[k];
  for (std::size_t k = mode + 1; k < shape.size(); ++k) right *= shape[k];
  const std::size_t rows = shape[mode];
  if (static_cast<std::size_t>(unfolded.rows()) != rows ||
      static_cast<std::size_t>(unfolded.cols()) != left * right)
    throw ShapeError("unfolded matrix does not match shape " + shape_to_string(shape));
  Vector data(static_cast<Eigen::Index>(shape_numel(shape)));
  for (std::size_t q = 0; q < right; ++q)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t l = 0; l < left; ++l)
        data[static_cast<Eigen::Index>(l + left * (i + rows * q))] =
            unfolded(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l + left * q));
  return DenseTensor(shape, std::move(data));
}

/// Columnwise Kronecker product A (.) B; rows of B vary fastest.
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("khatri_rao: column counts differ");
  Matrix out(a.rows() * b.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.cols(); ++r)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      out.col(r).segment(i * b.rows(), b.rows()) = a(i, r) * b.col(r);
  return out;
}

/// Khatri-Rao product of the factors with index in [first, last), taken in
/// decreasing mode order. Returns a 1 x R row of ones for an empty range.
inline Matrix khatri_rao_range(std::span<const Matrix> factors, std::size_t first,
                               std::size_t last, Eigen::Index rank) {
  Matrix out = Matrix::Ones(1, rank);
  for (std::size_t k = first; k < last; ++k) out = khatri_rao(factors[k], out);
  return out;
}

/// T_n: Khatri-Rao product of all factors but `skip`, in decreasing mode order.
inline Matrix khatri_rao_skip(std::span<const Matrix> factors, std::size_t skip) {
  if (factors.empty()) throw ShapeError("khatri_rao_skip: no factors");
  check_mode(factors.size(), skip);
  const Eigen::Index rank = factors[0].cols();
  for (const auto& f : factors)
    if (f.cols() != rank) throw ShapeError("khatri_rao_skip: mismatched column counts");
  Matrix out = Matrix::Ones(1, rank);
  for (std::size_t k = 0; k < factors.size(); ++k) {
    if (k == skip) continue;
    out = khatri_rao(factors[k], out);
  }
  return out;
}

/// G_n = Y_(n) T_n for raw factor matrices, by contracting the modes right
/// of n with one GEMM and the modes left of n columnwise. T_n is never formed.
inline Matrix mttkrp(const DenseTensor& t, std::span<const Matrix> factors,
                     std::size_t mode) {
  check_mode(t.order(), mode);
  if (factors.size() != t.order()) throw ShapeError("mttkrp: factor count != tensor order");
  const auto& shape = t.shape();
  const Eigen::Index rank = factors[0].cols();
  for (std::size_t k = 0; k < factors.size(); ++k) {
    if (static_cast<std::size_t>(factors[k].rows()) != shape[k] || factors[k].cols() != rank)
      throw ShapeError("mttkrp: factor shape mismatch in mode " + std::to_string(k));
  }
  std::size_t left = 1, right = 1;
  for (std::size_t k = 0; k < mode; ++k) left *= shape[k];
  for (std::size_t k = mode + 1; k < shape.size(); ++k) right *= shape[k];
  const auto rows = static_cast<Eigen::Index>(shape[mode]);
  const auto lft = static_cast<Eigen::Index>(left);

  Eigen::Map<const Matrix> data(t.data().data(), lft * rows, static_cast<Eigen::Index>(right));
  Matrix partial;
  if (mode + 1 == shape.size()) {
    partial = data.replicate(1, rank);
  } else {
    const Matrix kr_right = khatri_rao_range(factors, mode + 1, shape.size(), rank);
    partial.noalias() = data * kr_right;
  }
  if (mode == 0) return partial;
  const Matrix kr_left = khatri_rao_range(factors, 0, mode, rank);
  Matrix out(rows, rank);
  for (Eigen::Index r = 0; r < rank; ++r) {
    Eigen::Map<const Matrix> slab(partial.col(r).data(), lft, rows);
    out.col(r).noalias() = slab.transpose() * kr_left.col(r);
  }
  return out;
}

inline Matrix mttkrp(const DenseTensor& t, const KruskalModel& m, std::size_t mode) {
  check_compatible(t, m);
  return mttkrp(t, std::span<const Matrix>(m.factors), mode);
}

/// Gamma_{-n}: Hadamard product of the factor Grams over k != n.
inline Matrix gram_skip(std::span<const Matrix> factors, std::size_t skip) {
  check_mode(factors.size(), skip);
  const Eigen::Index rank = factors[0].cols();
  Matrix g = Matrix::Ones(rank, rank);
  for (std::size_t k = 0; k < factors.size(); ++k)
    if (k != skip) g.array() *= (factors[k].transpose() * factors[k]).array();
  return g;
}

inline Matrix gram_full(std::span<const Matrix> factors) {
  const Eigen::Index rank = factors[0].cols();
  Matrix g = Matrix::Ones(rank, rank);
  for (const auto& f : factors) g.array() *= (f.transpose() * f).array();
  return g;
}

inline Matrix gram_skip(const KruskalModel& m, std::size_t skip) {
  return gram_skip(std::span<const Matrix>(m.factors), skip);
}
inline Matrix gram_full(const KruskalModel& m) {
  return gram_full(std::span<const Matrix>(m.factors));
}

inline DenseTensor reconstruct(const KruskalModel& m) {
  m.validate();
  const Matrix scaled = m.factors[0] * m.weights.asDiagonal();
  const Matrix t0 = khatri_rao_skip(std::span<const Matrix>(m.factors), 0);
  Matrix y0 = scaled * t0.transpose();
  return DenseTensor(m.shape(), Eigen::Map<const Vector>(y0.data(), y0.size()));
}

/// ||Y - Y_hat||_F by explicit reconstruction.
inline double residual_norm_explicit(const DenseTensor& t, const KruskalModel& m) {
  check_compatible(t, m);
  return (t.data() - reconstruct(m).data()).norm();
}

/// ||Y - Y_hat||_F^2 via ||Y||^2 + eta' Gamma eta - 2 <G_n, U_eta^(n)>,
/// clamped at zero. `gn` must be mttkrp(t, m, mode).
inline double residual_sq_from_mttkrp(double y_sq_norm, const KruskalModel& m,
                                      const Matrix& gn, std::size_t mode) {
  const Matrix gamma = gram_full(m);
  const double model_sq = m.weights.dot(gamma * m.weights);
  const double inner = ((gn.array() * m.factors[mode].array()).colwise().sum().transpose().array() *
                        m.weights.array())
                           .sum();
  return std::max(0.0, y_sq_norm + model_sq - 2.0 * inner);
}

/// Fast path through the trace expansion. When the expansion cancels to
/// below 1e-6 of its terms it has lost most digits, and the residual is
/// recomputed from an explicit reconstruction.
inline double residual_norm(const DenseTensor& t, const KruskalModel& m) {
  check_compatible(t, m);
  const std::size_t mode = t.order() - 1;
  const double y_sq = t.squared_norm();
  const double fast = residual_sq_from_mttkrp(y_sq, m, mttkrp(t, m, mode), mode);
  const double scale = y_sq + m.weights.dot(gram_full(m) * m.weights);
  if (fast < 1e-6 * scale) return residual_norm_explicit(t, m);
  return std::sqrt(fast);
}

inline double relative_error(const DenseTensor& t, const KruskalModel& m) {
  const double yn = t.norm();
  if (yn == 0.0) throw std::domain_error("relative_error: zero-norm tensor");
  return residual_norm(t, m) / yn;
}

/// Unit-norm columns, eta_r >= 0. A zero column gives eta_r = 0 and e_1.
inline KruskalModel normalize(const KruskalModel& m) {
  m.validate();
  KruskalModel out = m;
  for (Eigen::Index r = 0; r < out.weights.size(); ++r) {
    double w = out.weights[r];
    bool zero = (w == 0.0);
    for (auto& f : out.factors) {
      const double nrm = f.col(r).norm();
      if (nrm == 0.0) {
        zero = true;
        continue;
      }
      f.col(r) /= nrm;
      w *= nrm;
    }
    if (w < 0.0) {
      w = -w;
      out.factors[0].col(r) *= -1.0;
    }
    if (zero) {
      w = 0.0;
      for (auto& f : out.factors) {
        f.col(r).setZero();
        f(0, r) = 1.0;
      }
    }
    out.weights[r] = w;
  }
  return out;
}

/// Folds the weights into the factors so that ||u_r^(n)|| = |eta_r|^(1/N)
/// in every mode; returned weights are all one. The sign of a negative
/// weight goes into the first factor.
inline KruskalModel balance(const KruskalModel& m) {
  KruskalModel n = normalize(m);
  const double inv_order = 1.0 / static_cast<double>(n.order());
  for (Eigen::Index r = 0; r < n.weights.size(); ++r) {
    const double s = std::pow(n.weights[r], inv_order);
    for (auto& f : n.factors) f.col(r) *= s;
    n.weights[r] = 1.0;
  }
  return n;
}

/// eta_r = prod_n ||u_r^(n)|| |w_r|, the rank-1 term norms.
inline Vector rank1_norms(const KruskalModel& m) {
  Vector eta = m.weights.cwiseAbs();
  for (const auto& f : m.factors) eta.array() *= f.colwise().norm().transpose().array();
  return eta;
}

}  // namespace epc
