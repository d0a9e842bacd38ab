#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "repscope/error.hpp"
#include "repscope/rng.hpp"
#include "repscope/tensor.hpp"
#include "support/oracles.hpp"

using namespace repscope;
using namespace repscope::testing;

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor({2, 0}), InvalidArgument);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), InvalidArgument);
  CHECK_THROWS_AS(t.reshaped({4, 2}), InvalidArgument);
  CHECK(t.reshaped({6}).rank() == 1);
  CHECK(t.at({1, 2}) == 0.0);
  CHECK_THROWS_AS(t.at({2, 0}), InvalidArgument);
}

TEST_CASE("matmul identity and permutation") {
  const Tensor a = random_matrix(3, 4, 1);
  CHECK(matmul(Tensor::identity(3), a) == a);
  const Tensor p = matmul(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{0, 1}, {1, 0}}));
  CHECK(p == Tensor::from_rows({{2, 1}, {4, 3}}));
  CHECK_THROWS_AS(matmul(random_matrix(2, 3, 1), random_matrix(2, 3, 2)), InvalidArgument);
}

TEST_CASE("matmul equals naive triple loop exactly") {
  const Tensor a = random_matrix(5, 7, 3);
  const Tensor b = random_matrix(7, 3, 4);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      CHECK(c(i, j) == s);
    }
  }
}

TEST_CASE("gemm kernels agree with eigen on odd sizes") {
  for (std::size_t trial = 0; trial < 5; ++trial) {
    const std::size_t m = 3 + trial * 7, k = 5 + trial * 3, n = 2 + trial * 11;
    const Tensor a = random_matrix(m, k, 10 + trial);
    const Tensor b = random_matrix(k, n, 20 + trial);
    const Eigen::MatrixXd ref = to_eigen(a) * to_eigen(b);
    std::vector<double> c(m * n, 1.0);
    kernels::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n, false);
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) err = std::max(err, std::abs(c[i * n + j] - ref(i, j)));
    }
    CHECK(err <= 1e-12);
    const Tensor bt = transpose(b);
    kernels::gemm_nt(a.data().data(), bt.data().data(), c.data(), m, k, n, false);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(c[i * n + j] - ref(i, j)) <= 1e-12);
    }
    const Tensor at = transpose(a);
    std::vector<double> acc(m * n, 0.5);
    kernels::gemm_tn(at.data().data(), b.data().data(), acc.data(), m, k, n, true);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(acc[i * n + j] - 0.5 - ref(i, j)) <= 1e-12);
    }
  }
}

TEST_CASE("matmul associativity") {
  const Tensor a = random_matrix(8, 8, 5), b = random_matrix(8, 8, 6), c = random_matrix(8, 8, 7);
  const Tensor l = matmul(matmul(a, b), c);
  const Tensor r = matmul(a, matmul(b, c));
  CHECK(max_abs_diff(l, r) / frobenius_norm(l) <= 1e-9);
}

TEST_CASE("gram definition") {
  CHECK(gram(Tensor::identity(2)) == Tensor::identity(2));
  CHECK(gram(Tensor::from_rows({{1, 1}, {2, 2}})) == Tensor::from_rows({{2, 4}, {4, 8}}));
  const Tensor x = random_matrix(6, 3, 8);
  const Tensor k = gram(x);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (std::size_t f = 0; f < 3; ++f) s += x(i, f) * x(j, f);
      CHECK(k(i, j) == s);
      CHECK(k(i, j) == k(j, i));
    }
  }
}

TEST_CASE("gram symmetric and orthogonally invariant") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_matrix(12, 9, 100 + seed);
    const Tensor k = gram(x);
    CHECK(max_abs_diff(k, transpose(k)) == 0.0);
    const Tensor q = random_orthogonal(9, 200 + seed);
    CHECK(max_abs_diff(k, gram(matmul(x, q))) <= 1e-9);
  }
}

TEST_CASE("frobenius norm") {
  CHECK(frobenius_norm(Tensor({3, 3})) == 0.0);
  CHECK(frobenius_norm(Tensor::from_rows({{3, 4}})) == 5.0);
  const Tensor t = random_matrix(40, 30, 9);
  CHECK(std::abs(frobenius_norm(t) - kahan_norm(t)) <= 1e-12 * kahan_norm(t));
}

TEST_CASE("cholesky solve matches eigen") {
  const Tensor x = random_matrix(10, 6, 11);
  Tensor a = matmul(transpose(x), x);
  for (std::size_t i = 0; i < 6; ++i) a(i, i) += 0.1;
  const Tensor b = random_matrix(6, 3, 12);
  const Tensor s = cholesky_solve(a, b);
  const Eigen::MatrixXd ref = to_eigen(a).ldlt().solve(to_eigen(b));
  CHECK((to_eigen(s) - ref).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK_THROWS_AS(cholesky_solve(Tensor::from_rows({{1, 2}, {2, 1}}), Tensor::identity(2)), DataError);
}

TEST_CASE("row and column helpers") {
  const Tensor x = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  const std::vector<std::size_t> rows{2, 0};
  CHECK(gather_rows(x, rows) == Tensor::from_rows({{7, 8, 9}, {1, 2, 3}}));
  CHECK(slice_columns(x, 1, 3) == Tensor::from_rows({{2, 3}, {5, 6}, {8, 9}}));
  CHECK(flatten_examples(Tensor({2, 3, 4})).shape() == Shape{2, 12});
}

TEST_CASE("rng streams are reproducible") {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(9);
  for (int i = 0; i < 1000; ++i) {
    const double t = c.truncated_normal(0.02);
    CHECK(std::abs(t) <= 0.04);
    CHECK(c.index(7) < 7);
  }
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  auto p = Rng(3).permutation(20);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 20; ++i) CHECK(p[i] == i);
}
