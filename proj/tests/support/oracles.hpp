#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "repscope/rng.hpp"
#include "repscope/tensor.hpp"

// Independent reference implementations used as test oracles. They share
// no code with the library beyond the Tensor container.
namespace repscope::testing {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t(i, j);
  }
  return m;
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(i, j) = m(i, j);
  }
  return t;
}

// Q factor of the QR decomposition of a Gaussian matrix.
inline Tensor random_orthogonal(std::size_t n, std::uint64_t seed) {
  const Eigen::MatrixXd a = to_eigen(random_matrix(n, n, seed));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
  return from_eigen(q);
}

inline double kahan_norm(const Tensor& t) {
  double sum = 0.0, comp = 0.0;
  for (double v : t.data()) {
    const double y = v * v - comp;
    const double s = sum + y;
    comp = (s - sum) - y;
    sum = s;
  }
  return std::sqrt(sum);
}

inline Eigen::MatrixXd centering(Eigen::Index n) {
  return Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
}

// Explicit H K H.
inline Eigen::MatrixXd center_oracle(const Eigen::MatrixXd& k) {
  const Eigen::MatrixXd h = centering(k.rows());
  return h * k * h;
}

inline double hsic_biased_oracle(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l) {
  const double n = static_cast<double>(k.rows());
  return (center_oracle(k) * center_oracle(l)).trace() / ((n - 1) * (n - 1));
}

// Three-term unbiased HSIC evaluated element by element with explicit loops.
inline double hsic_unbiased_oracle(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l) {
  const Eigen::Index n = k.rows();
  const double nd = static_cast<double>(n);
  auto kt = [&](Eigen::Index i, Eigen::Index j) { return i == j ? 0.0 : k(i, j); };
  auto lt = [&](Eigen::Index i, Eigen::Index j) { return i == j ? 0.0 : l(i, j); };
  double trace = 0.0, sum_k = 0.0, sum_l = 0.0, cross = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      trace += kt(i, j) * lt(j, i);
      sum_k += kt(i, j);
      sum_l += lt(i, j);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index q = 0; q < n; ++q) cross += kt(i, j) * lt(j, q);
    }
  }
  const double term = trace + sum_k * sum_l / ((nd - 1) * (nd - 2)) - 2.0 / (nd - 2) * cross;
  return term / (nd * (nd - 3));
}

// Unbiased CKA over one batch from raw features.
inline double cka_oracle(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const Eigen::MatrixXd k = x * x.transpose();
  const Eigen::MatrixXd l = y * y.transpose();
  return hsic_unbiased_oracle(k, l) / std::sqrt(hsic_unbiased_oracle(k, k) * hsic_unbiased_oracle(l, l));
}

// Ridge weights [d + 1, N] from the normal equations of the augmented
// system with an unpenalised bias column: (A'A + lambda D) W = A'Y where
// A = [X 1] and D = diag(1, ..., 1, 0).
inline Eigen::MatrixXd ridge_oracle(const Eigen::MatrixXd& x, const std::vector<int>& labels, int classes,
                                     double lambda) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Eigen::MatrixXd a(n, d + 1);
  a.leftCols(d) = x;
  a.col(d).setOnes();
  Eigen::MatrixXd y = Eigen::MatrixXd::Constant(n, classes, -1.0);
  for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  Eigen::MatrixXd reg = Eigen::MatrixXd::Identity(d + 1, d + 1) * lambda;
  reg(d, d) = 0.0;
  const Eigen::MatrixXd lhs = a.transpose() * a + reg;
  return lhs.fullPivLu().solve(a.transpose() * y);
}

}  // namespace repscope::testing
