#include <gtest/gtest.h>

#include "epc/cpd.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace epc;

namespace {

// Rank-2 tensor with well separated components; any sane fitter recovers it.
DenseTensor easy_tensor(std::uint64_t seed, const Shape& dims = {3, 4, 5}) {
  std::mt19937_64 rng(seed);
  return reconstruct(testutil::random_model(rng, dims, 2));
}

void expect_non_increasing(const RunTrace& tr, double slack = 1e-12) {
  const auto& r = tr.records();
  for (std::size_t i = 1; i < r.size(); ++i)
    EXPECT_LE(r[i].rel_error, r[i - 1].rel_error * (1.0 + slack) + 1e-15) << "iteration " << i;
}

}  // namespace

TEST(Init, IdentityOnesLayout) {
  const Matrix u = identity_ones_factor(4, 5);
  EXPECT_EQ(u.leftCols(4), Matrix::Identity(4, 4));
  EXPECT_EQ(u.col(4), Vector::Ones(4));
  const Matrix tall = identity_ones_factor(5, 3);
  EXPECT_EQ(tall, Matrix::Identity(5, 3));
}

TEST(Init, RandomIsSeededAndNormalized) {
  const auto a = init_random({3, 4, 2}, 3, 11);
  const auto b = init_random({3, 4, 2}, 3, 11);
  const auto c = init_random({3, 4, 2}, 3, 12);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(a.factors[n], b.factors[n]);
    EXPECT_NEAR(a.factors[n].colwise().norm().maxCoeff(), 1.0, 1e-14);
  }
  EXPECT_GT((a.factors[0] - c.factors[0]).norm(), 1e-3);
}

TEST(AlsModeUpdate, MatchesNormalEquations) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape dims{3, 2, 4};
    const DenseTensor t = testutil::random_tensor(rng, dims);
    const KruskalModel m = normalize(testutil::random_model(rng, dims, 2));
    for (std::size_t mode = 0; mode < 3; ++mode) {
      const Matrix a = oracle::mode_design(m.factors, mode);
      const Vector x = (a.transpose() * a).ldlt().solve(a.transpose() * t.data());
      const KruskalModel upd = als_mode_update(t, m, mode);
      EXPECT_LE((reconstruct(upd).data() - a * x).norm(), 1e-10 * t.norm());
    }
  }
}

TEST(AlsModeUpdate, SingularGramIsRegularized) {
  std::mt19937_64 rng(5);
  KruskalModel m = testutil::random_model(rng, {3, 3, 3}, 2);
  for (auto& f : m.factors) f.col(1) = f.col(0);
  const DenseTensor t = testutil::random_tensor(rng, {3, 3, 3});
  bool reg = false;
  const KruskalModel out = als_mode_update(t, m, 0, &reg);
  EXPECT_TRUE(reg);
  EXPECT_TRUE(out.weights.allFinite());
}

TEST(Als, RecoversExactRank2) {
  const DenseTensor t = easy_tensor(21);
  SolverOptions o;
  o.max_iters = 2000;
  o.target_rel_error = 1e-10;
  const auto r = als(t, init_random(t.shape(), 2, 4), o);
  EXPECT_LE(r.trace.back().rel_error, 1e-10);
  EXPECT_NEAR(relative_error(t, r.model), r.trace.back().rel_error, 1e-12);
  expect_non_increasing(r.trace);
}

TEST(Als, ErrorNeverIncreasesOnRandomData) {
  std::mt19937_64 rng(8);
  const DenseTensor t = testutil::random_tensor(rng, {4, 3, 5});
  SolverOptions o;
  o.max_iters = 200;
  o.tol_rel_change = 0.0;
  const auto r = als(t, init_random(t.shape(), 3, 9), o);
  EXPECT_EQ(r.iterations, 200);
  expect_non_increasing(r.trace, 1e-10);
}

TEST(Flm, RecoversExactRank2) {
  const DenseTensor t = easy_tensor(22);
  SolverOptions o;
  o.max_iters = 500;
  o.target_rel_error = 1e-12;
  const auto r = flm(t, init_random(t.shape(), 2, 5), o);
  EXPECT_LE(r.trace.back().rel_error, 1e-12);
  EXPECT_FALSE(r.stalled);
  expect_non_increasing(r.trace);
}

TEST(Flm, OrderFourTensor) {
  const DenseTensor t = easy_tensor(23, {2, 3, 2, 3});
  SolverOptions o;
  o.max_iters = 500;
  o.target_rel_error = 1e-12;
  const auto r = flm(t, init_random(t.shape(), 2, 6), o);
  EXPECT_LE(r.trace.back().rel_error, 1e-12);
}

TEST(Flm, TraceRecordsEtaAndDamping) {
  const DenseTensor t = easy_tensor(24);
  SolverOptions o;
  o.max_iters = 30;
  const auto r = flm(t, init_random(t.shape(), 2, 7), o);
  for (const auto& rec : r.trace.records()) {
    EXPECT_GT(rec.mu, 0.0);
    EXPECT_GT(rec.eta_sq_norm, 0.0);
  }
  EXPECT_NEAR(r.trace.back().eta_sq_norm, r.model.weights.squaredNorm(), 1e-9 * r.model.weights.squaredNorm());
}

TEST(Flm, Deterministic) {
  std::mt19937_64 rng(12);
  const DenseTensor t = testutil::random_tensor(rng, {3, 3, 3});
  SolverOptions o;
  o.max_iters = 60;
  const auto a = flm(t, init_random(t.shape(), 3, 1), o);
  const auto b = flm(t, init_random(t.shape(), 3, 1), o);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i)
    EXPECT_EQ(a.trace.records()[i].rel_error, b.trace.records()[i].rel_error);
}

TEST(Flm, TikhonovKeepsNormSmaller) {
  std::mt19937_64 rng(13);
  const DenseTensor t = testutil::random_tensor(rng, {3, 3, 3});
  SolverOptions o;
  o.max_iters = 200;
  const auto plain = flm(t, init_random(t.shape(), 4, 2), o);
  o.mu_tikh = 1.0;
  const auto reg = flm(t, init_random(t.shape(), 4, 2), o);
  EXPECT_LT(reg.model.weights.squaredNorm(), plain.model.weights.squaredNorm());
  EXPECT_GE(reg.trace.back().rel_error, plain.trace.back().rel_error - 1e-12);
}

TEST(Solvers, RejectBadInput) {
  const DenseTensor t = easy_tensor(25);
  const auto wrong_shape = init_random({3, 4, 4}, 2, 1);
  EXPECT_THROW(als(t, wrong_shape), ShapeError);
  EXPECT_THROW(flm(t, wrong_shape), ShapeError);
  SolverOptions o;
  o.max_iters = 0;
  EXPECT_THROW(als(t, init_random(t.shape(), 2, 1), o), std::invalid_argument);
  o.max_iters = 10;
  o.mu_tikh = -1.0;
  EXPECT_THROW(flm(t, init_random(t.shape(), 2, 1), o), std::invalid_argument);
}

TEST(RunTrace, AppendRenumbers) {
  RunTrace a, b;
  a.add(0.5, 1.0);
  a.add(0.4, 1.0);
  b.add(0.3, 2.0, 1e-3);
  a.append(b);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a.back().iter, 3);
  EXPECT_EQ(a.back().rel_error, 0.3);
  EXPECT_EQ(a.back().mu, 1e-3);
  EXPECT_GE(a.back().seconds, a.records()[1].seconds);
}
