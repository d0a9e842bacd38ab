#include "repscope/tensor.hpp"

#include <cmath>
#include <sstream>

#include "repscope/error.hpp"

namespace repscope {

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw InvalidArgument("tensor shape must have at least one axis");
  for (auto d : shape) {
    if (d == 0) throw InvalidArgument("tensor dimension sizes must be >= 1, got " + shape_to_string(shape));
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw InvalidArgument(std::string(what) + ": expected a 2-D tensor, got " + shape_to_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_volume(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_volume(shape_) != data_.size()) {
    throw InvalidArgument("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_to_string(shape_));
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw InvalidArgument("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw InvalidArgument("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw InvalidArgument("at: index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw InvalidArgument("at: index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[flat_index(index)]; }

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[flat_index(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_volume(shape) != data_.size()) {
    throw InvalidArgument("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  Tensor t(std::move(shape), data_);
  return t;
}

void Tensor::set_labels(std::vector<std::string> labels) {
  if (!labels.empty() && labels.size() != shape_.size()) {
    throw InvalidArgument("one label per axis required");
  }
  labels_ = std::move(labels);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

ActivationMatrix::ActivationMatrix(Tensor v, std::string name, std::optional<std::size_t> token)
    : values(std::move(v)), layer_name(std::move(name)), token_index(token) {
  if (values.rank() != 2) {
    throw InvalidArgument("activation matrix '" + layer_name + "' must be 2-D, got " +
                          shape_to_string(values.shape()));
  }
  if (values.dim(0) < 4) {
    throw InvalidArgument("activation matrix '" + layer_name + "' needs at least 4 examples, got " +
                          std::to_string(values.dim(0)));
  }
}

namespace kernels {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      // Four independent partial sums, combined in a fixed order.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
      }
      for (; p < k; ++p) s0 += ai[p] * bj[p];
      const double s = (s0 + s1) + (s2 + s3);
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw InvalidArgument("matmul: inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                          shape_to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1), false);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Tensor gram(const Tensor& x) {
  require_matrix(x, "gram");
  const std::size_t m = x.dim(0);
  const std::size_t p = x.dim(1);
  Tensor k({m, m});
  const double* xd = x.data().data();
  // Upper triangle then mirror, so the result is exactly symmetric.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0.0;
      const double* xi = xd + i * p;
      const double* xj = xd + j * p;
      for (std::size_t q = 0; q < p; ++q) s += xi[q] * xj[q];
      k(i, j) = s;
      k(j, i) = s;
    }
  }
  return k;
}

Tensor gram(const ActivationMatrix& x) { return gram(x.values); }

double frobenius_norm(const Tensor& t) {
  if (t.empty()) throw InvalidArgument("frobenius_norm of an empty tensor");
  // Scaled accumulation avoids overflow for large entries.
  double scale = 0.0;
  for (double v : t.data()) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;
  double s = 0.0;
  for (double v : t.data()) {
    const double r = v / scale;
    s += r * r;
  }
  return scale * std::sqrt(s);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument("max_abs_diff: shapes differ: " + shape_to_string(a.shape()) + " vs " +
                          shape_to_string(b.shape()));
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t p = x.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * p);
  for (auto r : rows) {
    if (r >= x.dim(0)) throw InvalidArgument("gather_rows: row index out of range");
    auto src = x.data().subspan(r * p, p);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor({rows.size(), p}, std::move(out));
}

Tensor slice_columns(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_columns");
  if (begin >= end || end > x.dim(1)) throw InvalidArgument("slice_columns: invalid column range");
  const std::size_t w = end - begin;
  Tensor out({x.dim(0), w});
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, begin + j);
  }
  return out;
}

Tensor flatten_examples(const Tensor& x) {
  if (x.rank() < 1) throw InvalidArgument("flatten_examples: empty tensor");
  const std::size_t m = x.dim(0);
  return x.reshaped({m, x.size() / m});
}

Tensor cholesky_solve(const Tensor& a, const Tensor& b) {
  require_matrix(a, "cholesky_solve");
  require_matrix(b, "cholesky_solve");
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n || b.dim(0) != n) throw InvalidArgument("cholesky_solve: dimension mismatch");
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw DataError("cholesky_solve: matrix is not positive definite (pivot " + std::to_string(j) + ")");
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / ljj;
    }
  }
  const std::size_t r = b.dim(1);
  Tensor x = b;
  for (std::size_t c = 0; c < r; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * x(p, c);
      x(i, c) = s / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = x(i, c);
      for (std::size_t p = i + 1; p < n; ++p) s -= l(p, i) * x(p, c);
      x(i, c) = s / l(i, i);
    }
  }
  return x;
}

}  // namespace repscope
