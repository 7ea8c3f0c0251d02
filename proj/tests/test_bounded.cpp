#include <gtest/gtest.h>

#include "epc/bounded.hpp"
#include "epc/harness/generators.hpp"
#include "test_util.hpp"

using namespace epc;

namespace {

// Exact rank-2 2x2x2 tensor; the bound is 70% of the generating norm, so the
// constraint is active at the solution.
struct Tiny {
  DenseTensor t;
  double eps = 0.0;
};

Tiny tiny(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<Matrix> f;
  for (int n = 0; n < 3; ++n) {
    Matrix u(2, 2);
    for (int i = 0; i < 4; ++i) u.data()[i] = nd(rng);
    f.push_back(u);
  }
  const KruskalModel truth = normalize(KruskalModel(Vector::Ones(2), f));
  return {reconstruct(truth), 0.7 * truth.weights.norm()};
}

double kkt_residual(const DenseTensor& t, const KruskalModel& m, double lambda) {
  const auto p = calculus::ParamVector::from_model(m);
  const auto f = p.factors();
  const Vector gc = calculus::grad_c(t, std::span<const Matrix>(f));
  const Vector gf = calculus::grad_f(std::span<const Matrix>(f));
  return (gc + lambda * gf).norm() / gc.norm();
}

BoundConfig bound(double eps, int iters = 3000) {
  BoundConfig b;
  b.epsilon = eps;
  b.max_iters = iters;
  b.tol_rel_change = 0.0;
  return b;
}

}  // namespace

TEST(BalsModeUpdate, LooseBoundIsAls) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const DenseTensor t = testutil::random_tensor(rng, {3, 4, 2});
    const KruskalModel m = normalize(testutil::random_model(rng, {3, 4, 2}, 2));
    for (std::size_t mode = 0; mode < 3; ++mode) {
      BalsModeInfo info;
      const KruskalModel b = bals_mode_update(t, m, mode, 1e8, &info);
      const KruskalModel a = als_mode_update(t, m, mode);
      EXPECT_FALSE(info.active);
      EXPECT_LE((reconstruct(b).data() - reconstruct(a).data()).norm(), 1e-10 * t.norm());
    }
  }
}

TEST(BalsModeUpdate, ActiveBoundIsShiftedAls) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const DenseTensor t = testutil::random_tensor(rng, {3, 4, 3});
    const KruskalModel m = normalize(testutil::random_model(rng, {3, 4, 3}, 3));
    for (std::size_t mode = 0; mode < 3; ++mode) {
      const double ls_norm = als_mode_update(t, m, mode).weights.norm();
      const double eps = 0.5 * ls_norm;
      BalsModeInfo info;
      const KruskalModel b = bals_mode_update(t, m, mode, eps, &info);
      ASSERT_TRUE(info.active);
      EXPECT_NEAR(b.weights.norm(), eps, 1e-10 * eps);
      // U = G (Gamma + lambda I)^{-1}
      Matrix shifted = gram_skip(m, mode);
      shifted.diagonal().array() += info.lambda;
      KruskalModel ref = m;
      ref.factors[mode] = shifted.ldlt().solve(mttkrp(t, m, mode).transpose()).transpose();
      ref.weights.setOnes();
      EXPECT_LE((reconstruct(b).data() - reconstruct(ref).data()).norm(), 1e-8 * reconstruct(ref).norm());
    }
  }
}

TEST(Bals, NormBoundAndMonotoneResidual) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(s);
    const DenseTensor t = testutil::random_tensor(rng, {4, 4, 4});
    const double eps = 0.5 * t.norm();
    const auto r = bals(t, init_random(t.shape(), 3, s), bound(eps, 200));
    const auto& rec = r.trace.records();
    for (std::size_t i = 0; i < rec.size(); ++i) {
      EXPECT_LE(std::sqrt(rec[i].eta_sq_norm), eps * (1.0 + 1e-10));
      EXPECT_EQ(rec[i].bound, eps);
      if (i > 0) {
        EXPECT_LE(rec[i].rel_error, rec[i - 1].rel_error * (1.0 + 1e-12));
      }
    }
  }
}

TEST(Bals, RejectsBadBound) {
  std::mt19937_64 rng(3);
  const DenseTensor t = testutil::random_tensor(rng, {2, 2, 2});
  const auto m = init_random(t.shape(), 2, 1);
  EXPECT_THROW(bals_mode_update(t, m, 0, 0.0), std::invalid_argument);
  EXPECT_THROW(bals(t, m, bound(-1.0)), std::invalid_argument);
  BoundConfig b = bound(1.0);
  b.grow_factor = 1.0;
  EXPECT_THROW(bsqp(t, m, b), std::invalid_argument);
}

// Collinear 4x4x4 rank-5 example with sum eta^2 <= 5.05, from [I, 1] plus ten
// ALS sweeps.
TEST(BoundedCollinear, BeatsUnboundedFitters) {
  const auto sc = harness::gen_scenario_tensor("ex1", 7);
  SolverOptions warm;
  warm.max_iters = 10;
  warm.tol_rel_change = 0.0;
  const KruskalModel init = als(sc.tensor, init_identity_ones(sc.tensor.shape(), 5), warm).model;
  SolverOptions o;
  o.max_iters = 3000;
  o.tol_rel_change = 0.0;
  o.target_rel_error = 1e-12;
  const double als_err = als(sc.tensor, init, o).trace.back().rel_error;
  const double flm_err = flm(sc.tensor, init, o).trace.back().rel_error;
  BoundConfig b = bound(std::sqrt(5.05));
  b.target_rel_error = 1e-12;
  const auto q = bsqp(sc.tensor, init, b);
  const auto a = bals(sc.tensor, init, b);
  EXPECT_LE(q.trace.back().rel_error, 1e-10);
  EXPECT_LT(q.trace.back().rel_error, flm_err);
  EXPECT_LT(q.trace.back().rel_error, als_err);
  EXPECT_LE(q.model.weights.squaredNorm(), 5.05 * (1.0 + 1e-8));
  EXPECT_LT(a.trace.back().rel_error, als_err);
  EXPECT_LE(a.model.weights.squaredNorm(), 5.05 * (1.0 + 1e-10));
}

TEST(Bsqp, KktAtConvergedTinyInstance) {
  const auto [t, eps] = tiny(3);
  const auto q = bsqp(t, init_random(t.shape(), 2, 53), bound(eps));
  const double lambda = q.trace.back().lambda;
  EXPECT_GT(lambda, 0.0);
  EXPECT_NEAR(q.model.weights.norm(), eps, 1e-10 * eps);
  EXPECT_LE(kkt_residual(t, q.model, lambda), 1e-6);
}

TEST(Bsqp, FeasibleAndNearStationaryAcrossSeeds) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto [t, eps] = tiny(s);
    const auto q = bsqp(t, init_random(t.shape(), 2, s + 50), bound(eps));
    EXPECT_LE(q.model.weights.squaredNorm(), eps * eps * (1.0 + 1e-8)) << "seed " << s;
    if (q.iterations < 3000) {
      EXPECT_LE(kkt_residual(t, q.model, q.trace.back().lambda), 1e-5) << "seed " << s;
    }
  }
}

TEST(Bsqp, InfeasibleStartEntersBall) {
  std::mt19937_64 rng(4);
  const DenseTensor t = testutil::random_tensor(rng, {3, 3, 3});
  KruskalModel init = init_random(t.shape(), 3, 9);
  init.weights *= 50.0;
  const auto q = bsqp(t, init, bound(1.0, 500));
  EXPECT_LE(q.model.weights.squaredNorm(), 1.0 + 1e-8);
  EXPECT_LT(q.trace.back().rel_error, 1.0);
}

TEST(BoundSchedule, GrowsOnStallAndShrinksOnProgress) {
  BoundConfig c;
  c.adapt = true;
  c.stall_window = 3;
  c.epsilon = 2.0;
  detail::BoundSchedule s(c);
  RunTrace flat;
  for (int i = 0; i < 3; ++i) {
    flat.add(0.5, 1.0);
    EXPECT_FALSE(s.update(flat, 1.0));
  }
  flat.add(0.5, 1.0);
  EXPECT_TRUE(s.update(flat, 1.0));
  EXPECT_EQ(s.epsilon(), 4.0);

  detail::BoundSchedule d(c);
  RunTrace fast;
  double e = 1.0;
  for (int i = 0; i < 4; ++i) fast.add(e /= 10.0, 1.0);
  EXPECT_TRUE(d.update(fast, 1.0));
  EXPECT_NEAR(d.epsilon(), 2.0 / 1.5, 1e-15);

  c.adapt = false;
  detail::BoundSchedule off(c);
  EXPECT_FALSE(off.update(flat, 1.0));
}

TEST(Bsqp, AdaptiveBoundRecordsSchedule) {
  const auto sc = harness::gen_scenario_tensor("ex_matmul", 0);
  BoundConfig b = bound(1.0, 300);
  b.adapt = true;
  const auto q = bsqp(sc.tensor, init_random(sc.tensor.shape(), 7, 2), b);
  double prev = 0.0;
  bool moved = false;
  for (const auto& r : q.trace.records()) {
    EXPECT_GT(r.bound, 0.0);
    if (prev > 0.0 && r.bound != prev) moved = true;
    prev = r.bound;
  }
  EXPECT_TRUE(moved);
}
