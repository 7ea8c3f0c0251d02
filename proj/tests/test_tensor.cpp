#include <gtest/gtest.h>

#include <array>

#include "epc/tensor.hpp"
#include "test_util.hpp"

using namespace epc;
using testutil::gaussian;
using testutil::random_model;
using testutil::random_tensor;

namespace {

// Entry (i_1..i_N) read by explicit strides, independent of unfold().
double at(const DenseTensor& t, const std::vector<std::size_t>& idx) {
  std::size_t lin = 0, stride = 1;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    lin += idx[k] * stride;
    stride *= t.dim(k);
  }
  return t.data()[static_cast<Eigen::Index>(lin)];
}

// Mode-n unfolding by iterating every multi-index.
Matrix unfold_oracle(const DenseTensor& t, std::size_t mode) {
  const Shape& s = t.shape();
  std::size_t cols = 1;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (k != mode) cols *= s[k];
  Matrix out(static_cast<Eigen::Index>(s[mode]), static_cast<Eigen::Index>(cols));
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t lin = 0; lin < t.numel(); ++lin) {
    std::size_t rem = lin;
    for (std::size_t k = 0; k < s.size(); ++k) {
      idx[k] = rem % s[k];
      rem /= s[k];
    }
    std::size_t col = 0, stride = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (k == mode) continue;
      col += idx[k] * stride;
      stride *= s[k];
    }
    out(static_cast<Eigen::Index>(idx[mode]), static_cast<Eigen::Index>(col)) = at(t, idx);
  }
  return out;
}

std::vector<Shape> small_shapes() {
  std::vector<Shape> out;
  for (std::size_t a = 1; a <= 5; ++a)
    for (std::size_t b = 1; b <= 5; ++b) {
      out.push_back({a, b});
      for (std::size_t c = 1; c <= 5; ++c) {
        out.push_back({a, b, c});
        if (a * b * c * 2 <= 200) out.push_back({a, b, c, 2});
      }
    }
  return out;
}

}  // namespace

TEST(DenseTensor, RejectsBadConstruction) {
  EXPECT_THROW(DenseTensor(Shape{}), ShapeError);
  EXPECT_THROW(DenseTensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(DenseTensor(Shape{2, 2}, Vector::Zero(3)), ShapeError);
  Vector bad = Vector::Zero(4);
  bad[2] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(DenseTensor(Shape{2, 2}, bad), NonFiniteError);
}

TEST(Unfold, MatrixCases) {
  std::mt19937_64 rng(1);
  const Matrix a = gaussian(rng, 3, 4);
  const DenseTensor t({3, 4}, Eigen::Map<const Vector>(a.data(), a.size()));
  EXPECT_EQ(unfold(t, 0), a);
  EXPECT_EQ(unfold(t, 1), Matrix(a.transpose()));
}

TEST(Unfold, IndexMapOracle2x2x2) {
  Vector data(8);
  for (int i = 0; i < 8; ++i) data[i] = i + 1;
  const DenseTensor t({2, 2, 2}, data);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(unfold(t, n), unfold_oracle(t, n)) << n;
  // First index fastest: Y(1,0,0) = 2, Y(0,1,0) = 3, Y(0,0,1) = 5.
  Matrix expect0(2, 4);
  expect0 << 1, 3, 5, 7, 2, 4, 6, 8;
  EXPECT_EQ(unfold(t, 0), expect0);
  Matrix expect2(2, 4);
  expect2 << 1, 2, 3, 4, 5, 6, 7, 8;
  EXPECT_EQ(unfold(t, 2), expect2);
}

TEST(Unfold, ModeOutOfRange) {
  const DenseTensor t(Shape{2, 2});
  EXPECT_THROW(unfold(t, 2), ShapeError);
}

TEST(Unfold, FoldRoundTripAllShapes) {
  std::mt19937_64 rng(2);
  for (const auto& s : small_shapes()) {
    const DenseTensor t = random_tensor(rng, s);
    for (std::size_t n = 0; n < s.size(); ++n) {
      const Matrix u = unfold(t, n);
      ASSERT_EQ(u, unfold_oracle(t, n));
      EXPECT_TRUE(fold(u, n, s) == t);
    }
  }
}

TEST(KhatriRao, SingleFactor) {
  std::mt19937_64 rng(3);
  std::vector<Matrix> f{gaussian(rng, 3, 2), gaussian(rng, 4, 2)};
  EXPECT_EQ(khatri_rao_skip(f, 1), f[0]);
}

TEST(KhatriRao, OuterProductOracle) {
  std::vector<Matrix> f{Matrix(2, 1), Matrix(2, 1), Matrix(5, 1)};
  f[0] << 2, 3;
  f[1] << 5, 7;
  f[2].setRandom();
  // Column is vec(a o b) with a's index fastest.
  Vector expect(4);
  expect << 10, 15, 14, 21;
  EXPECT_EQ(Vector(khatri_rao_skip(f, 2).col(0)), expect);
}

TEST(KhatriRao, OnesAbsorb) {
  std::vector<Matrix> f{Matrix::Ones(2, 2), Matrix::Ones(3, 2), Matrix::Ones(4, 2)};
  EXPECT_EQ(khatri_rao_skip(f, 2), Matrix(Matrix::Ones(6, 2)));
}

TEST(KhatriRao, MismatchedColumns) {
  std::vector<Matrix> f{Matrix::Ones(2, 2), Matrix::Ones(3, 3), Matrix::Ones(4, 2)};
  EXPECT_THROW(khatri_rao_skip(f, 2), ShapeError);
}

TEST(KhatriRao, ReconstructionIdentity) {
  std::mt19937_64 rng(4);
  const KruskalModel m = random_model(rng, {3, 4, 2, 3}, 3);
  const DenseTensor y = reconstruct(m);
  for (std::size_t n = 0; n < 4; ++n) {
    const Matrix lhs = unfold(y, n);
    const Matrix rhs = m.factors[n] * m.weights.asDiagonal() *
                       khatri_rao_skip(std::span<const Matrix>(m.factors), n).transpose();
    EXPECT_LT(testutil::rel_diff(lhs, rhs), 1e-13);
  }
}

TEST(Mttkrp, ExactModel) {
  std::mt19937_64 rng(5);
  KruskalModel m = random_model(rng, {3, 4, 5}, 2);
  m.weights << 2.0, -0.5;
  const DenseTensor y = reconstruct(m);
  for (std::size_t n = 0; n < 3; ++n) {
    const Matrix expect = m.factors[n] * m.weights.asDiagonal() * gram_skip(m, n);
    EXPECT_LT(testutil::rel_diff(mttkrp(y, m, n), expect), 1e-12);
  }
}

TEST(Mttkrp, ZeroTensor) {
  std::mt19937_64 rng(6);
  const KruskalModel m = random_model(rng, {3, 4, 5}, 2);
  const DenseTensor z(Shape{3, 4, 5});
  for (std::size_t n = 0; n < 3; ++n) EXPECT_TRUE(mttkrp(z, m, n).isZero(0.0));
}

TEST(Mttkrp, MaterializedOracleAllSmallShapes) {
  std::mt19937_64 rng(7);
  for (const auto& s : small_shapes()) {
    const DenseTensor t = random_tensor(rng, s);
    for (Eigen::Index r = 1; r <= 3; ++r) {
      const KruskalModel m = random_model(rng, s, r);
      for (std::size_t n = 0; n < s.size(); ++n) {
        const Matrix naive =
            unfold_oracle(t, n) * khatri_rao_skip(std::span<const Matrix>(m.factors), n);
        ASSERT_LT(testutil::rel_diff(mttkrp(t, m, n), naive), 1e-12)
            << shape_to_string(s) << " R=" << r << " mode " << n;
      }
    }
  }
}

TEST(Mttkrp, ShapeMismatch) {
  std::mt19937_64 rng(8);
  const KruskalModel m = random_model(rng, {3, 4, 5}, 2);
  EXPECT_THROW(mttkrp(DenseTensor(Shape{3, 4, 4}), m, 0), ShapeError);
}

TEST(Gram, OrthonormalFactors) {
  std::mt19937_64 rng(9);
  std::vector<Matrix> f;
  for (int k = 0; k < 3; ++k) {
    Eigen::HouseholderQR<Matrix> qr(gaussian(rng, 5, 3));
    f.push_back(qr.householderQ() * Matrix::Identity(5, 3));
  }
  const KruskalModel m(Vector::Ones(3), f);
  for (std::size_t n = 0; n < 3; ++n)
    EXPECT_LT((gram_skip(m, n) - Matrix::Identity(3, 3)).norm(), 1e-13);
}

TEST(Gram, EqualGrams) {
  std::mt19937_64 rng(10);
  const Matrix u = gaussian(rng, 4, 3);
  const KruskalModel m(Vector::Ones(3), {u, u, u});
  const Matrix g = u.transpose() * u;
  EXPECT_LT(testutil::rel_diff(gram_skip(m, 0), g.cwiseProduct(g)), 1e-14);
}

TEST(Gram, MaterializationOracle) {
  std::mt19937_64 rng(11);
  const KruskalModel m = random_model(rng, {3, 4, 2}, 3);
  for (std::size_t n = 0; n < 3; ++n) {
    const Matrix t = khatri_rao_skip(std::span<const Matrix>(m.factors), n);
    const Matrix g = gram_skip(m, n);
    EXPECT_LT(testutil::rel_diff(g, t.transpose() * t), 1e-13);
    EXPECT_LT((g - g.transpose()).norm(), 1e-14);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(g).eigenvalues().minCoeff(), -1e-12);
    const Matrix un = m.factors[n].transpose() * m.factors[n];
    EXPECT_LT(testutil::rel_diff(gram_full(m), g.cwiseProduct(un)), 1e-13);
  }
}

TEST(Residual, TrivialCases) {
  std::mt19937_64 rng(12);
  KruskalModel m = random_model(rng, {3, 4, 5}, 2);
  const DenseTensor y = reconstruct(m);
  EXPECT_LE(relative_error(y, m), 1e-12);
  EXPECT_LE(residual_norm_explicit(y, m) / y.norm(), 1e-12);
  m.weights.setZero();
  EXPECT_NEAR(relative_error(y, m), 1.0, 1e-14);
  EXPECT_THROW(relative_error(DenseTensor(Shape{3, 4, 5}), m), std::domain_error);
  EXPECT_THROW(relative_error(random_tensor(rng, {3, 4, 4}), m), ShapeError);
}

TEST(Residual, FastPathMatchesExplicit) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{2 + static_cast<std::size_t>(trial % 3), 3, 2 + static_cast<std::size_t>(trial % 4)};
    const DenseTensor t = random_tensor(rng, s);
    KruskalModel m = random_model(rng, s, 1 + trial % 3);
    m.weights = testutil::gaussian_vec(rng, m.weights.size());
    const double fast = residual_norm(t, m);
    const double slow = residual_norm_explicit(t, m);
    EXPECT_NEAR(fast, slow, 1e-10 * slow);
    for (std::size_t n = 0; n < s.size(); ++n) {
      const double expansion = std::sqrt(residual_sq_from_mttkrp(t.squared_norm(), m, mttkrp(t, m, n), n));
      EXPECT_NEAR(expansion, slow, 1e-10 * slow);
    }
    EXPECT_NEAR(relative_error(t, m), slow / t.norm(), 1e-10 * slow / t.norm());
  }
}

TEST(Normalize, Identity) {
  std::mt19937_64 rng(14);
  KruskalModel m = random_model(rng, {3, 4}, 2);
  for (auto& f : m.factors) f.colwise().normalize();
  m.weights << 2.0, 3.0;
  const KruskalModel n = normalize(m);
  EXPECT_LT((n.weights - m.weights).norm(), 1e-15);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_LT((n.factors[k] - m.factors[k]).norm(), 1e-15);
}

TEST(Normalize, ScaledColumn) {
  std::mt19937_64 rng(15);
  KruskalModel m = normalize(random_model(rng, {3, 4, 2}, 2));
  const Vector w0 = m.weights;
  const DenseTensor y0 = reconstruct(m);
  m.factors[1].col(1) *= 3.0;
  const KruskalModel n = normalize(m);
  EXPECT_NEAR(n.weights[1], 3.0 * w0[1], 1e-13);
  EXPECT_NEAR(n.weights[0], w0[0], 1e-13);
  EXPECT_LT(testutil::rel_diff(reconstruct(n).data(), reconstruct(m).data()), 1e-13);
  EXPECT_GT((reconstruct(n).data() - y0.data()).norm(), 1e-3);
}

TEST(Normalize, ZeroColumn) {
  std::mt19937_64 rng(16);
  KruskalModel m = random_model(rng, {3, 4}, 2);
  m.factors[1].col(0).setZero();
  const KruskalModel n = normalize(m);
  EXPECT_EQ(n.weights[0], 0.0);
  for (const auto& f : n.factors) {
    EXPECT_EQ(f(0, 0), 1.0);
    EXPECT_EQ(f.col(0).norm(), 1.0);
  }
}

TEST(Normalize, InvariantsOnRandomModels) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    KruskalModel m = random_model(rng, {3, 2, 4}, 3);
    m.weights = testutil::gaussian_vec(rng, 3);
    const DenseTensor y = reconstruct(m);
    const double energy = m.rank1_squared_norm();
    for (const KruskalModel& out : {normalize(m), balance(m)}) {
      EXPECT_LT(testutil::rel_diff(reconstruct(out).data(), y.data()), 1e-12);
      EXPECT_NEAR(out.rank1_squared_norm(), energy, 1e-12 * energy);
    }
    const KruskalModel n = normalize(m);
    EXPECT_GE(n.weights.minCoeff(), 0.0);
    for (const auto& f : n.factors)
      EXPECT_LT((f.colwise().norm().array() - 1.0).abs().maxCoeff(), 1e-14);
    EXPECT_NEAR(n.weights.squaredNorm(), energy, 1e-12 * energy);
    const KruskalModel b = balance(m);
    for (Eigen::Index r = 0; r < 3; ++r) {
      const double expect = std::pow(n.weights[r], 1.0 / 3.0);
      for (const auto& f : b.factors) EXPECT_NEAR(f.col(r).norm(), expect, 1e-13 * expect);
    }
    EXPECT_TRUE(b.weights.isOnes(0.0));
  }
}
