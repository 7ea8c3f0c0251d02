#pragma once

#include <random>
#include <vector>

#include "epc/tensor.hpp"

namespace testutil {

using epc::Matrix;
using epc::Vector;

inline Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> nd;
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

inline Vector gaussian_vec(std::mt19937_64& rng, Eigen::Index n) {
  return gaussian(rng, n, 1).col(0);
}

inline epc::KruskalModel random_model(std::mt19937_64& rng, const epc::Shape& dims,
                                      Eigen::Index rank) {
  std::vector<Matrix> f;
  for (auto d : dims) f.push_back(gaussian(rng, static_cast<Eigen::Index>(d), rank));
  return epc::KruskalModel(Vector::Ones(rank), std::move(f));
}

inline epc::DenseTensor random_tensor(std::mt19937_64& rng, const epc::Shape& dims) {
  return epc::DenseTensor(dims, gaussian_vec(rng, static_cast<Eigen::Index>(epc::shape_numel(dims))));
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace testutil
