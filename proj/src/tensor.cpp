#include "colongpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "colongpt/error.hpp"
#include "colongpt/kernels.hpp"

namespace colongpt {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[1];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<std::size_t> shape) {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor transpose(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  Tensor t = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = m[i * c + j];
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  kernels::gemm(a.rows(), b.cols(), a.cols(), a.span(), b.span(), c.span(), false);
  return c;
}

namespace {

std::vector<double> transpose_raw(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

}  // namespace

void matmul_nt_into(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
                    std::span<const double> b, std::span<double> c) {
  if (a.size() < m * k || b.size() < n * k || c.size() < m * n) throw ShapeError("matmul_nt: buffer too small");
  if (n * k <= m * k) {
    const std::vector<double> bt = transpose_raw(b, n, k);
    kernels::gemm(m, n, k, a, bt, c, false);
  } else {
    // C^T = B * A^T
    const std::vector<double> at = transpose_raw(a, m, k);
    std::vector<double> ct(n * m);
    kernels::gemm(n, m, k, b, at, ct, false);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) c[j * n + i] = ct[i * m + j];
  }
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " * T" + shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.rows());
  matmul_nt_into(a.rows(), b.rows(), a.cols(), a.span(), b.span(), c.span());
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: T" + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace colongpt
