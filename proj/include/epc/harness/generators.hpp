#pragma once

// Synthetic tensors for the benchmark scenarios: collinear factors,
// weighted models, two-block tensors, matrix multiplication tensors, noise.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>

#include "epc/error.hpp"
#include "epc/tensor.hpp"

namespace epc::harness {

/// splitmix64 step; used to derive independent per-trial seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t trial_seed(std::uint64_t master, std::uint64_t trial) {
  return splitmix64(master ^ splitmix64(trial + 1));
}

/// Pairwise inner products of the collinear block: a fixed value when
/// lo == hi, otherwise drawn from [lo, hi].
struct Collinearity {
  double lo = 0.0;
  double hi = 0.0;
  static Collinearity fixed(double c) { return {c, c}; }
};

inline Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> nd;
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

/// Target Gram of the collinear block. For a range the one-factor form
/// a a' + diag(1 - a^2) with a_r in [sqrt(lo), sqrt(hi)] keeps every
/// off-diagonal entry a_r a_s inside [lo, hi] and is always positive definite.
inline Matrix collinear_gram(Eigen::Index block, const Collinearity& c, std::mt19937_64& rng) {
  if (!(c.lo <= c.hi) || !std::isfinite(c.lo) || !std::isfinite(c.hi) || c.hi >= 1.0 || c.lo <= -1.0)
    throw std::invalid_argument("collinearity must satisfy -1 < lo <= hi < 1");
  Matrix g;
  if (c.lo == c.hi) {
    g = Matrix::Constant(block, block, c.lo);
    g.diagonal().setOnes();
  } else {
    if (c.lo < 0.0) throw std::invalid_argument("collinearity ranges must be nonnegative");
    std::uniform_real_distribution<double> u(std::sqrt(c.lo), std::sqrt(c.hi));
    Vector a(block);
    for (Eigen::Index r = 0; r < block; ++r) a[r] = u(rng);
    g = a * a.transpose();
    g.diagonal().setOnes();
  }
  return g;
}

/// I x R factor whose first `block` columns have the requested pairwise
/// inner products (via a Cholesky factor applied to a random orthonormal
/// basis); the remaining columns are unit-normalized Gaussian vectors.
inline Matrix gen_collinear_factors(Eigen::Index rows, Eigen::Index rank, const Collinearity& corr,
                                    Eigen::Index block, std::uint64_t seed) {
  if (rows < 1 || rank < 1) throw ShapeError("gen_collinear_factors: empty factor");
  if (block < 0 || block > rank) throw ShapeError("gen_collinear_factors: block exceeds rank");
  if (block > rows)
    throw ShapeError("gen_collinear_factors: a collinear block of " + std::to_string(block) +
                     " columns needs at least as many rows");
  std::mt19937_64 rng(seed);
  Matrix u(rows, rank);
  if (block > 0) {
    const Matrix g = collinear_gram(block, corr, rng);
    Eigen::LLT<Matrix> llt(g);
    if (llt.info() != Eigen::Success) {
      const double emin = Eigen::SelfAdjointEigenSolver<Matrix>(g).eigenvalues().minCoeff();
      throw InfeasibleError("target Gram matrix is not positive definite (min eigenvalue " +
                            std::to_string(emin) + ")");
    }
    Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(rng, rows, block));
    const Matrix q = qr.householderQ() * Matrix::Identity(rows, block);
    u.leftCols(block) = q * llt.matrixL().transpose();
  }
  if (rank > block) {
    Matrix rest = gaussian_matrix(rng, rows, rank - block);
    rest.colwise().normalize();
    u.rightCols(rank - block) = rest;
  }
  return u;
}

/// Cubic tensor spec: every mode gets its own collinear factor.
struct CollinearSpec {
  Eigen::Index size = 4;
  Eigen::Index rank = 5;
  std::size_t order = 3;
  Collinearity corr = Collinearity::fixed(0.99);
  Eigen::Index block = 4;
  Vector weights;  ///< empty: all ones
};

inline KruskalModel gen_collinear_model(const CollinearSpec& spec, std::uint64_t seed) {
  std::vector<Matrix> f;
  for (std::size_t n = 0; n < spec.order; ++n)
    f.push_back(gen_collinear_factors(spec.size, spec.rank, spec.corr, spec.block,
                                      splitmix64(seed + 0x100 * (n + 1))));
  Vector w = spec.weights.size() ? spec.weights : Vector(Vector::Ones(spec.rank));
  if (w.size() != spec.rank) throw ShapeError("weights length differs from rank");
  return KruskalModel(std::move(w), std::move(f));
}

/// Sum of `blocks` independent rank-`block_rank` collinear models,
/// concatenated into one model.
inline KruskalModel gen_block_model(Eigen::Index size, Eigen::Index block_rank, int blocks,
                                    const Collinearity& corr, std::uint64_t seed) {
  const Eigen::Index rank = block_rank * blocks;
  std::vector<Matrix> f(3, Matrix(size, rank));
  for (int b = 0; b < blocks; ++b) {
    CollinearSpec spec{size, block_rank, 3, corr, block_rank, {}};
    const KruskalModel m = gen_collinear_model(spec, splitmix64(seed + 7919 * (b + 1)));
    for (std::size_t n = 0; n < 3; ++n) f[n].middleCols(b * block_rank, block_rank) = m.factors[n];
  }
  return KruskalModel(Vector::Ones(rank), std::move(f));
}

/// <m,n,p> multiplication tensor of size (mn) x (np) x (pm):
/// vec(AB) = Y x_1 vec(A')' x_2 vec(B')'.
inline DenseTensor gen_matmul_tensor(Eigen::Index m, Eigen::Index n, Eigen::Index p) {
  if (m < 1 || n < 1 || p < 1) throw std::invalid_argument("matmul dimensions must be positive");
  const auto d1 = static_cast<std::size_t>(m * n), d2 = static_cast<std::size_t>(n * p),
             d3 = static_cast<std::size_t>(p * m);
  DenseTensor t({d1, d2, d3});
  Vector data = Vector::Zero(static_cast<Eigen::Index>(d1 * d2 * d3));
  // (AB)(i,k) = sum_j A(i,j) B(j,k): vec(A') index j + n i, vec(B') index
  // k + p j, vec(AB) index i + m k.
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index k = 0; k < p; ++k) {
        const auto a = static_cast<std::size_t>(j + n * i);
        const auto b = static_cast<std::size_t>(k + p * j);
        const auto c = static_cast<std::size_t>(i + m * k);
        data[static_cast<Eigen::Index>(a + d1 * (b + d2 * c))] = 1.0;
      }
  return DenseTensor({d1, d2, d3}, std::move(data));
}

/// t + noise with ||t||^2 / ||noise||^2 = 10^(snr_db/10) exactly. An
/// infinite SNR returns t unchanged.
inline DenseTensor add_noise(const DenseTensor& t, double snr_db, std::uint64_t seed) {
  if (std::isnan(snr_db)) throw std::invalid_argument("add_noise: SNR is NaN");
  if (snr_db == std::numeric_limits<double>::infinity()) return t;
  if (snr_db == -std::numeric_limits<double>::infinity())
    throw std::invalid_argument("add_noise: SNR must be finite or +inf");
  const double tn = t.norm();
  if (tn == 0.0) throw std::domain_error("add_noise: zero tensor");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Vector noise(static_cast<Eigen::Index>(t.numel()));
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = nd(rng);
  noise *= tn / (noise.norm() * std::pow(10.0, snr_db / 20.0));
  return DenseTensor(t.shape(), t.data() + noise);
}

inline double realized_snr_db(const DenseTensor& clean, const DenseTensor& noisy) {
  return 10.0 * std::log10(clean.squared_norm() / (noisy.data() - clean.data()).squaredNorm());
}

// ---------------------------------------------------------------------------
// Benchmark scenarios

struct Scenario {
  std::string id;
  DenseTensor tensor;
  KruskalModel truth;
};

/// ex1: 4x4x4, rank 5, first four columns at inner product 0.99, unit
/// weights. ex1b / ex2: same with eta_r = 10 r. ex4: cubic size I, rank R,
/// first I columns collinear. ex_bcd: two rank-6 6x6x6 blocks with
/// collinearity in [0.95, 0.999]. ex_matmul: <m,n,p> multiplication tensor
/// (no ground-truth model).
struct ScenarioParams {
  Eigen::Index size = 0;  ///< ex4: I (0 means 4)
  Eigen::Index rank = 0;  ///< ex4: R (0 means I + 1)
  double corr = 0.99;
  Eigen::Index mm = 2, mn = 2, mp = 2;  ///< ex_matmul
};

inline Scenario gen_scenario_tensor(const std::string& id, std::uint64_t seed,
                                 const ScenarioParams& params = {}) {
  Scenario s{id, DenseTensor(), KruskalModel()};
  if (id == "ex1" || id == "ex1b" || id == "ex2") {
    CollinearSpec spec{4, 5, 3, Collinearity::fixed(0.99), 4, {}};
    if (id != "ex1") spec.weights = Vector::LinSpaced(5, 10.0, 50.0);
    s.truth = gen_collinear_model(spec, seed);
  } else if (id == "ex4") {
    const Eigen::Index i = params.size > 0 ? params.size : 4;
    const Eigen::Index r = params.rank > 0 ? params.rank : i + 1;
    if (r < i) throw std::invalid_argument("ex4 needs rank >= size");
    CollinearSpec spec{i, r, 3, Collinearity::fixed(params.corr), i, {}};
    s.truth = gen_collinear_model(spec, seed);
  } else if (id == "ex_bcd") {
    s.truth = gen_block_model(6, 6, 2, Collinearity{0.95, 0.999}, seed);
  } else if (id == "ex_matmul") {
    s.tensor = gen_matmul_tensor(params.mm, params.mn, params.mp);
    return s;
  } else {
    throw std::invalid_argument("unknown scenario '" + id + "'");
  }
  s.tensor = reconstruct(s.truth);
  return s;
}

}  // namespace epc::harness
