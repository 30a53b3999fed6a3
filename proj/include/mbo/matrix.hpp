#ifndef MBO_MATRIX_HPP
#define MBO_MATRIX_HPP

#include <algorithm>
#include <cstring>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mbo/errors.hpp"

namespace mbo {

// Dense row-major matrix of doubles. Rows are examples throughout the library.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw ArgumentError("matrix data size does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

inline Matrix select_rows(const Matrix& a, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::ranges::copy(a.row(idx[i]), out.row(i).begin());
  return out;
}

inline Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols() && !a.empty() && !b.empty()) throw ArgumentError("vstack: column mismatch");
  Matrix out(a.rows() + b.rows(), std::max(a.cols(), b.cols()));
  std::ranges::copy(a.storage(), out.data());
  std::ranges::copy(b.storage(), out.data() + a.size());
  return out;
}

namespace detail {

// out[i, :] = init[:] + sum_k a[i, k] * b[k, :]
// Every output element accumulates over k in ascending order starting from
// its init value, independent of the row count and of the register blocking.
// Results are therefore bitwise identical for a row evaluated alone or inside
// any batch.
using v8d = double __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

inline void gemm_rows(const double* a, std::size_t n, std::size_t k, const double* b, std::size_t m,
                      const double* init, double* out) {
  constexpr std::size_t kRowBlock = 4;
  constexpr std::size_t kColBlock = 16;
  const v8d zero = {};
  std::size_t i = 0;
  for (; i + kRowBlock <= n; i += kRowBlock) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    std::size_t j = 0;
    for (; j + kColBlock <= m; j += kColBlock) {
      const v8d i0 = init ? load8(init + j) : zero, i1 = init ? load8(init + j + 8) : zero;
      v8d c00 = i0, c01 = i1, c10 = i0, c11 = i1, c20 = i0, c21 = i1, c30 = i0, c31 = i1;
      for (std::size_t p = 0; p < k; ++p) {
        const v8d b0 = load8(b + p * m + j), b1 = load8(b + p * m + j + 8);
        c00 += a0[p] * b0;
        c01 += a0[p] * b1;
        c10 += a1[p] * b0;
        c11 += a1[p] * b1;
        c20 += a2[p] * b0;
        c21 += a2[p] * b1;
        c30 += a3[p] * b0;
        c31 += a3[p] * b1;
      }
      store8(out + i * m + j, c00);
      store8(out + i * m + j + 8, c01);
      store8(out + (i + 1) * m + j, c10);
      store8(out + (i + 1) * m + j + 8, c11);
      store8(out + (i + 2) * m + j, c20);
      store8(out + (i + 2) * m + j + 8, c21);
      store8(out + (i + 3) * m + j, c30);
      store8(out + (i + 3) * m + j + 8, c31);
    }
    const std::size_t rest = m - j;
    for (std::size_t r = 0; r < kRowBlock && rest > 0; ++r) {
      const double* ar = a + (i + r) * k;
      double* orow = out + (i + r) * m + j;
      const double* brest = b + j;
      for (std::size_t q = 0; q < rest; ++q) orow[q] = init ? init[j + q] : 0.0;
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t q = 0; q < rest; ++q) orow[q] += ar[p] * brest[p * m + q];
    }
  }
  for (; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t j = 0; j < m; ++j) orow[j] = init ? init[j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C = A * B, optionally with a per-column bias added before accumulation.
inline Matrix matmul(const Matrix& a, const Matrix& b, std::span<const double> bias = {}) {
  if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
  if (!bias.empty() && bias.size() != b.cols()) throw ArgumentError("matmul: bias length mismatch");
  Matrix c(a.rows(), b.cols());
  detail::gemm_rows(a.data(), a.rows(), a.cols(), b.data(), b.cols(), bias.empty() ? nullptr : bias.data(),
                    c.data());
  return c;
}

// Raw-pointer variant for weights living inside a flat parameter vector.
inline Matrix matmul(const Matrix& a, const double* b, std::size_t b_cols, const double* bias) {
  Matrix c(a.rows(), b_cols);
  detail::gemm_rows(a.data(), a.rows(), a.cols(), b, b_cols, bias, c.data());
  return c;
}

// acc += A^T * B, accumulating over rows of A and B in order.
inline void add_transposed_product(const Matrix& a, const Matrix& b, double* acc) {
  if (a.rows() != b.rows()) throw ArgumentError("transposed product: row mismatch");
  const Matrix at = transpose(a);
  Matrix tmp(at.rows(), b.cols());
  detail::gemm_rows(at.data(), at.rows(), at.cols(), b.data(), b.cols(), nullptr, tmp.data());
  for (std::size_t i = 0; i < tmp.size(); ++i) acc[i] += tmp.data()[i];
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline bool all_finite(std::span<const double> v) {
  return std::ranges::all_of(v, [](double x) { return std::isfinite(x); });
}

}  // namespace mbo

#endif  // MBO_MATRIX_HPP
