#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace repscope {

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major tensor of doubles. A default-constructed tensor is empty
// (rank 0, no data) and only serves as a placeholder.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor filled(Shape shape, double value);
  static Tensor identity(std::size_t n);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }

  // 2-D element access; no bounds checks beyond debug asserts.
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  // Checked access for any rank.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  Tensor reshaped(Shape shape) const;

  const std::vector<std::string>& labels() const { return labels_; }
  void set_labels(std::vector<std::string> labels);

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
  std::vector<std::string> labels_;
};

// m examples x p features for one layer (or one token of a layer).
struct ActivationMatrix {
  ActivationMatrix(Tensor values, std::string layer_name,
                   std::optional<std::size_t> token_index = std::nullopt);

  std::size_t examples() const { return values.dim(0); }
  std::size_t features() const { return values.dim(1); }

  Tensor values;
  std::string layer_name;
  std::optional<std::size_t> token_index;
};

// Matrix products with a fixed loop order so results are bit-reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor gram(const Tensor& x);
Tensor gram(const ActivationMatrix& x);
double frobenius_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Selects rows (examples) of a 2-D tensor in the given order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Keeps columns [begin, end) of a 2-D tensor.
Tensor slice_columns(const Tensor& x, std::size_t begin, std::size_t end);
// Views an [m, ...] tensor as [m, prod(rest)].
Tensor flatten_examples(const Tensor& x);

// Solves A X = B for symmetric positive-definite A via Cholesky.
// Throws DataError if A is not numerically positive definite.
Tensor cholesky_solve(const Tensor& a, const Tensor& b);

namespace kernels {

// c[m,n] (+)= a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// c[m,n] (+)= a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// c[m,n] (+)= a[k,m]^T * b[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

}  // namespace kernels

}  // namespace repscope
