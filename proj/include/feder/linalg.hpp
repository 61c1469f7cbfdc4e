#pragma once

// Dense row-major matrices, order-4 tensors, mode unfolding and singular
// values. Everything here is a pure function on values.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feder/error.hpp"

namespace feder::linalg {

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " contains a non-finite value");
  }
}

}  // namespace detail

class Matrix {
public:
  Matrix(std::size_t rows, std::size_t cols) : Matrix(rows, cols, std::vector<double>(rows * cols, 0.0)) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (rows_ == 0 || cols_ == 0) throw ShapeMismatchError("matrix dimensions must be positive");
    if (values_.size() != rows_ * cols_) {
      throw ShapeMismatchError("matrix expects " + std::to_string(rows_ * cols_) + " values, got " +
                               std::to_string(values_.size()));
    }
    detail::require_finite(values_, "matrix");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  bool operator==(const Matrix&) const = default;

private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> values_;
};

using Shape4 = std::array<std::size_t, 4>;

// Convolution weight of shape (k1, k2, n3, n4) = (kernel height, kernel
// width, input channels, output channels). Storage is k1-major: the flat
// index of (i1, i2, i3, i4) is ((i1 * k2 + i2) * n3 + i3) * n4 + i4.
class Tensor4 {
public:
  explicit Tensor4(Shape4 shape) : Tensor4(shape, std::vector<double>(count(shape), 0.0)) {}

  Tensor4(Shape4 shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeMismatchError("tensor dimensions must be positive");
    }
    if (values_.size() != count(shape_)) {
      throw ShapeMismatchError("tensor expects " + std::to_string(count(shape_)) + " values, got " +
                               std::to_string(values_.size()));
    }
    detail::require_finite(values_, "tensor");
  }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t dim(int mode) const { return shape_.at(static_cast<std::size_t>(mode - 1)); }

  std::size_t offset(std::size_t i1, std::size_t i2, std::size_t i3, std::size_t i4) const noexcept {
    return ((i1 * shape_[1] + i2) * shape_[2] + i3) * shape_[3] + i4;
  }
  double& operator()(std::size_t i1, std::size_t i2, std::size_t i3, std::size_t i4) noexcept {
    return values_[offset(i1, i2, i3, i4)];
  }
  double operator()(std::size_t i1, std::size_t i2, std::size_t i3, std::size_t i4) const noexcept {
    return values_[offset(i1, i2, i3, i4)];
  }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  bool operator==(const Tensor4&) const = default;

  static std::size_t count(const Shape4& s) noexcept { return s[0] * s[1] * s[2] * s[3]; }

private:
  Shape4 shape_;
  std::vector<double> values_;
};

// Descending, non-negative singular values.
struct SingularSpectrum {
  std::vector<double> sigma;

  std::size_t size() const noexcept { return sigma.size(); }
  double max() const noexcept { return sigma.empty() ? 0.0 : sigma.front(); }
  std::size_t nonzero_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(sigma.begin(), sigma.end(), [](double s) { return s > 0.0; }));
  }
  bool operator==(const SingularSpectrum&) const = default;
};

inline constexpr int kDefaultUnfoldMode = 4;
inline constexpr std::size_t kMaxSvdDimension = 512;
// Relative to the largest singular value; anything below is reported as 0.
inline constexpr double kSingularValueClamp = 1e-12;

namespace detail {

inline void check_mode(int mode) {
  if (mode < 1 || mode > 4) throw InvalidArgumentError("unfold mode must be in 1..4, got " + std::to_string(mode));
}

// Visits every element of a tensor with its (row, col) in the mode-d
// unfolding. Columns enumerate the remaining three indices in their original
// order, last one fastest.
template <class F>
void for_each_unfolded(const Shape4& s, int mode, F&& f) {
  const auto d = static_cast<std::size_t>(mode - 1);
  std::array<std::size_t, 3> rest{};
  for (std::size_t i = 0, j = 0; i < 4; ++i) {
    if (i != d) rest[j++] = i;
  }
  std::array<std::size_t, 4> idx{};
  std::size_t flat = 0;
  for (idx[0] = 0; idx[0] < s[0]; ++idx[0]) {
    for (idx[1] = 0; idx[1] < s[1]; ++idx[1]) {
      for (idx[2] = 0; idx[2] < s[2]; ++idx[2]) {
        for (idx[3] = 0; idx[3] < s[3]; ++idx[3], ++flat) {
          const std::size_t col = (idx[rest[0]] * s[rest[1]] + idx[rest[1]]) * s[rest[2]] + idx[rest[2]];
          f(flat, idx[d], col);
        }
      }
    }
  }
}

}  // namespace detail

inline Matrix unfold(const Tensor4& t, int mode = kDefaultUnfoldMode) {
  detail::check_mode(mode);
  const std::size_t rows = t.dim(mode);
  const std::size_t cols = Tensor4::count(t.shape()) / rows;
  std::vector<double> out(rows * cols);
  const auto src = t.values();
  detail::for_each_unfolded(t.shape(), mode, [&](std::size_t flat, std::size_t r, std::size_t c) {
    out[r * cols + c] = src[flat];
  });
  return Matrix(rows, cols, std::move(out));
}

// Inverse of unfold for a known original shape.
inline Tensor4 refold(const Matrix& m, const Shape4& shape, int mode = kDefaultUnfoldMode) {
  detail::check_mode(mode);
  const std::size_t rows = shape[static_cast<std::size_t>(mode - 1)];
  if (m.rows() != rows || m.rows() * m.cols() != Tensor4::count(shape)) {
    throw ShapeMismatchError("matrix shape does not match the requested refold");
  }
  std::vector<double> out(Tensor4::count(shape));
  const auto src = m.values();
  detail::for_each_unfolded(shape, mode, [&](std::size_t flat, std::size_t r, std::size_t c) {
    out[flat] = src[r * m.cols() + c];
  });
  return Tensor4(shape, std::move(out));
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  }
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeMismatchError("matmul inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

inline Matrix scaled(const Matrix& m, double c) {
  std::vector<double> v(m.values().begin(), m.values().end());
  for (double& x : v) x *= c;
  return Matrix(m.rows(), m.cols(), std::move(v));
}

inline double frobenius_norm(const Matrix& m) {
  double sum = 0.0;
  for (double v : m.values()) sum += v * v;
  return std::sqrt(sum);
}

// One-sided (Hestenes) Jacobi: rotate column pairs of the tall orientation of
// m until all columns are mutually orthogonal; the column norms are then the
// singular values.
inline SingularSpectrum svd_values(const Matrix& m) {
  const std::size_t n = std::min(m.rows(), m.cols());
  const std::size_t len = std::max(m.rows(), m.cols());
  if (n > kMaxSvdDimension) {
    throw DimensionTooLargeError("svd_values supports min(rows, cols) <= " + std::to_string(kMaxSvdDimension) +
                                 ", got " + std::to_string(n));
  }

  // cols[j] holds column j of the tall orientation, contiguous.
  std::vector<std::vector<double>> cols(n, std::vector<double>(len));
  const bool tall = m.rows() >= m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (tall) cols[c][r] = m(r, c);
      else cols[r][c] = m(r, c);
    }
  }

  constexpr double tol = 1e-15;
  constexpr int max_sweeps = 80;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& a = cols[p];
        auto& b = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          alpha += a[i] * a[i];
          beta += b[i] * b[i];
          gamma += a[i] * b[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double ai = a[i];
          const double bi = b[i];
          a[i] = c * ai - s * bi;
          b[i] = s * ai + c * bi;
        }
      }
    }
    if (!rotated) break;
  }

  SingularSpectrum out;
  out.sigma.reserve(n);
  for (const auto& col : cols) {
    double sum = 0.0;
    for (double v : col) sum += v * v;
    out.sigma.push_back(std::sqrt(sum));
  }
  std::sort(out.sigma.begin(), out.sigma.end(), std::greater<>());
  const double cutoff = kSingularValueClamp * out.max();
  for (double& s : out.sigma) {
    if (s < cutoff) s = 0.0;
  }
  return out;
}

}  // namespace feder::linalg
