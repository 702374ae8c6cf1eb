#pragma once

// Dense row-major matrices and the handful of kernels the decoder needs.
// Every reduction accumulates in double regardless of the storage type, and
// every loop runs in a fixed order, so a kernel call is bit-reproducible.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfsp/error.hpp"

namespace cfsp {

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

template <Scalar T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorCode::shape, "matrix buffer holds " + std::to_string(data_.size()) +
                                 " values, expected " + std::to_string(rows_ * cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <Scalar To, Scalar From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  if constexpr (std::same_as<To, From>) {
    return m;
  } else {
    std::vector<To> out(m.size());
    std::transform(m.flat().begin(), m.flat().end(), out.begin(),
                   [](From v) { return static_cast<To>(v); });
    return Matrix<To>(m.rows(), m.cols(), std::move(out));
  }
}

template <Scalar To, Scalar From>
std::vector<To> vector_cast(const std::vector<From>& v) {
  return std::vector<To>(v.begin(), v.end());
}

template <Scalar T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

// Multiply-accumulate counter fed by every matrix product below. Used to
// cross-check analytic MAC accounting against what a forward pass executes.
inline thread_local std::uint64_t mac_counter = 0;

namespace detail {

inline void require(bool ok, const char* op, std::size_t a, std::size_t b) {
  if (!ok) {
    fail(ErrorCode::shape, std::string(op) + ": inner dimensions disagree (" +
                               std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

}  // namespace detail

/// c = a * b for a [m x k], b [k x n].
template <Scalar T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul", a.cols(), b.rows());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<T> c(m, n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto arow = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const auto brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    auto crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
  mac_counter += static_cast<std::uint64_t>(m) * k * n;
  return c;
}

/// c = a * b^T for a [m x k], b [n x k]. This is the layout of a linear
/// layer whose weight is stored [out x in].
template <Scalar T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_bt", a.cols(), b.cols());
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto arow = a.row(i);
    auto crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
      }
      crow[j] = static_cast<T>(acc);
    }
  }
  mac_counter += static_cast<std::uint64_t>(m) * k * n;
  return c;
}

/// c = a^T * b for a [k x m], b [k x n]. Gradient-side product.
template <Scalar T>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_at", a.rows(), b.rows());
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const auto arow = a.row(p);
    const auto brow = b.row(p);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* out = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += av * static_cast<double>(brow[j]);
    }
  }
  mac_counter += static_cast<std::uint64_t>(m) * k * n;
  Matrix<T> c(m, n);
  for (std::size_t i = 0; i < m * n; ++i) c.flat()[i] = static_cast<T>(acc[i]);
  return c;
}

template <Scalar T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

template <Scalar T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) fail(ErrorCode::shape, "add: shape mismatch");
  auto dst = a.flat();
  auto src = b.flat();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <Scalar T>
Matrix<T> add(Matrix<T> a, const Matrix<T>& b) {
  add_inplace(a, b);
  return a;
}

template <Scalar T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) fail(ErrorCode::shape, "hadamard: shape mismatch");
  Matrix<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.flat()[i] = a.flat()[i] * b.flat()[i];
  return c;
}

template <Scalar T>
void scale_inplace(Matrix<T>& a, T s) {
  for (auto& v : a.flat()) v *= s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <Scalar T>
T silu(T x) {
  const double xd = x;
  return static_cast<T>(xd * sigmoid(xd));
}

template <Scalar T>
Matrix<T> silu(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.flat()[i] = silu(x.flat()[i]);
  return y;
}

/// d silu(x) / dx
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

/// 1/sqrt(mean(x^2) + eps) per row; the factor rms_norm applies.
template <Scalar T>
std::vector<double> rms_inverse(const Matrix<T>& x, double eps) {
  std::vector<double> inv(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double sq = 0.0;
    for (T v : x.row(r)) sq += static_cast<double>(v) * static_cast<double>(v);
    inv[r] = 1.0 / std::sqrt(sq / static_cast<double>(x.cols()) + eps);
  }
  return inv;
}

template <Scalar T>
Matrix<T> rms_norm(const Matrix<T>& x, std::span<const T> gain, double eps) {
  if (gain.size() != x.cols()) fail(ErrorCode::shape, "rms_norm: gain length differs from row width");
  if (eps < 0.0) fail(ErrorCode::config, "rms_norm: eps must be non-negative");
  Matrix<T> y(x.rows(), x.cols());
  const auto inv = rms_inverse(x, eps);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto out = y.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      // A zero row with eps == 0 yields 0 * inf; keep it at zero.
      const double v = in[c] == T(0) ? 0.0 : static_cast<double>(in[c]) * inv[r];
      out[c] = static_cast<T>(v * static_cast<double>(gain[c]));
    }
  }
  return y;
}

/// Row i is a softmax over columns 0..i; columns past i are zero.
template <Scalar T>
Matrix<T> causal_softmax_rows(const Matrix<T>& scores) {
  if (scores.rows() != scores.cols()) fail(ErrorCode::shape, "causal_softmax_rows: scores must be square");
  const std::size_t t = scores.rows();
  Matrix<T> p(t, t);
  std::vector<double> e(t);
  for (std::size_t i = 0; i < t; ++i) {
    const auto row = scores.row(i);
    double mx = row[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      sum += e[j];
    }
    auto out = p.row(i);
    for (std::size_t j = 0; j <= i; ++j) out[j] = static_cast<T>(e[j] / sum);
  }
  return p;
}

/// out[c] = sqrt(sum_t x[t][c]^2).
template <Scalar T>
std::vector<double> channel_l2_norms(const Matrix<T>& x) {
  std::vector<double> sq(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) sq[c] += static_cast<double>(row[c]) * static_cast<double>(row[c]);
  }
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

}  // namespace cfsp
