#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "csn/errors.hpp"

namespace csn {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector,
/// rank 2 a matrix (rows x cols).
class Tensor {
 public:
  Tensor() : shape_{}, values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(element_count(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != element_count(shape_)) {
      throw DimensionError("tensor of shape " + to_string(shape_) + " given " + std::to_string(values_.size()) +
                           " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool is_scalar() const noexcept { return values_.size() == 1 && rank() <= 1; }
  bool is_vector() const noexcept { return rank() == 1; }
  bool is_matrix() const noexcept { return rank() == 2; }

  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  double item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor of shape " + to_string(shape_));
    return values_[0];
  }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return values_[r * shape_[1] + c]; }

  std::span<double> data() noexcept { return values_; }
  std::span<const double> data() const noexcept { return values_; }
  std::span<double> row(std::size_t r) noexcept { return std::span<double>(values_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const noexcept {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  const std::vector<double>& values() const noexcept { return values_; }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const noexcept {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
};

namespace kernels {

// All reductions below run in a fixed row-major, left-to-right order so the
// results are bit-identical across runs.

/// out(m x n) += a(m x k) * b(k x n)
inline void matmul_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* out_row = out + i * n;
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a_row[p];
      if (s == 0.0) continue;
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += s * b_row[j];
    }
  }
}

/// out(k x n) += a(m x k)^T * b(m x n)
inline void matmul_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                          std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* a_row = a + p * k;
    const double* b_row = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double s = a_row[i];
      if (s == 0.0) continue;
      double* out_row = out + i * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += s * b_row[j];
    }
  }
}

inline std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

}  // namespace kernels

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " * " + to_string(b.shape()));
  }
  Tensor out(Shape{a.rows(), b.cols()});
  kernels::matmul_acc(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
  return out;
}

/// a(m x k) * b(n x k)^T, the layout of a dense layer whose weight is stored out x in.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt shape mismatch: " + to_string(a.shape()) + " * " + to_string(b.shape()) +
                         "^T");
  }
  const auto bt = kernels::transpose(b.data().data(), b.rows(), b.cols());
  Tensor out(Shape{a.rows(), b.rows()});
  kernels::matmul_acc(a.data().data(), bt.data(), out.data().data(), a.rows(), a.cols(), b.rows());
  return out;
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  if (!m.is_matrix()) throw DimensionError("gather_rows expects a matrix, got " + to_string(m.shape()));
  Tensor out(Shape{rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw IndexError("row index " + std::to_string(rows[i]) + " out of range");
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace csn
