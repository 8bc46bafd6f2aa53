#pragma once

// Dense row-major matrices and the handful of kernels the rest of the
// library is built on. Products go through Eigen on a single thread, so
// results are bit-stable across runs on one machine.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "aanet/error.hpp"

namespace aanet {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("matrix data length", rows_, cols_, data_.size(), 1);
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged initializer", rows_, cols_, 1, r.size());
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reinterpret the row-major buffer with a different shape of equal size.
  Matrix reshaped(std::size_t rows, std::size_t cols) const& {
    if (rows * cols != size()) throw ShapeError("reshape", rows_, cols_, rows, cols);
    return Matrix(rows, cols, data_);
  }
  Matrix reshaped(std::size_t rows, std::size_t cols) && {
    if (rows * cols != size()) throw ShapeError("reshape", rows_, cols_, rows, cols);
    return Matrix(rows, cols, std::move(data_));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool same_shape(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline void require_same_shape(const char* what, const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) throw ShapeError(what, a.rows(), a.cols(), b.rows(), b.cols());
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<EigenRowMajor> eigen_view(Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }
inline Eigen::Map<const EigenRowMajor> eigen_view(const Matrix& m) {
  return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())};
}

}  // namespace detail

/// out += a * b
inline void matmul_accumulate(Matrix& out, const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  if (out.rows() != a.rows() || out.cols() != b.cols())
    throw ShapeError("matmul output", out.rows(), out.cols(), a.rows(), b.cols());
  if (out.empty() || a.cols() == 0) return;
  detail::eigen_view(out).noalias() += detail::eigen_view(a) * detail::eigen_view(b);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix out(a.rows(), b.cols());
  matmul_accumulate(out, a, b);
  return out;
}

/// out += aᵀ * b
inline void matmul_at_b_accumulate(Matrix& out, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_at_b", a.rows(), a.cols(), b.rows(), b.cols());
  if (out.rows() != a.cols() || out.cols() != b.cols())
    throw ShapeError("matmul_at_b output", out.rows(), out.cols(), a.cols(), b.cols());
  if (out.empty() || a.rows() == 0) return;
  detail::eigen_view(out).noalias() += detail::eigen_view(a).transpose() * detail::eigen_view(b);
}

inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  matmul_at_b_accumulate(out, a, b);
  return out;
}

/// a * bᵀ
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_a_bt", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix out(a.rows(), b.rows());
  if (out.empty() || a.cols() == 0) return out;
  detail::eigen_view(out).noalias() = detail::eigen_view(a) * detail::eigen_view(b).transpose();
  return out;
}

/// Adds `bias` (1 x cols) to every row.
inline void add_row_vector(Matrix& m, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != m.cols())
    throw ShapeError("row broadcast", m.rows(), m.cols(), bias.rows(), bias.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* r = m.data() + i * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] += bias[j];
  }
}

/// bias_grad += column sums of m.
inline void accumulate_column_sums(Matrix& bias_grad, const Matrix& m) {
  if (bias_grad.rows() != 1 || bias_grad.cols() != m.cols())
    throw ShapeError("column sums", bias_grad.rows(), bias_grad.cols(), m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* r = m.data() + i * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j) bias_grad[j] += r[j];
  }
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  require_same_shape("add", a, b);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void scale_inplace(Matrix& a, double s) {
  for (double& v : a.values()) v *= s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Log-space helpers

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return kNegInf;
  const double m = *std::max_element(xs.begin(), xs.end());
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::vector<double> stable_log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error("log_softmax of an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  const double lse = std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - m - lse;
  return out;
}

/// Row-wise log-softmax.
inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto lp = stable_log_softmax(logits.row(r));
    std::copy(lp.begin(), lp.end(), out.row(r).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small dense SVD (one-sided Jacobi) and symmetric eigensolver (cyclic Jacobi)

struct Svd {
  std::vector<double> singular_values;  // descending
  Matrix u;                             // rows x k, orthonormal columns
  Matrix v;                             // cols x k, orthonormal columns
};

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns are eigenvectors
};

namespace detail {

inline constexpr std::size_t kSvdMaxDim = 64;
inline constexpr int kJacobiMaxSweeps = 100;

/// Replace near-zero columns of `q` (flagged in `fill`) with unit vectors
/// orthogonal to every other column.
inline void complete_orthonormal_columns(Matrix& q, const std::vector<bool>& fill) {
  const std::size_t n = q.rows();
  std::size_t candidate = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    if (!fill[c]) continue;
    for (; candidate < n; ++candidate) {
      std::vector<double> e(n, 0.0);
      e[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < q.cols(); ++o) {
          if (o == c || (fill[o] && o > c)) continue;
          double d = 0.0;
          for (std::size_t i = 0; i < n; ++i) d += q(i, o) * e[i];
          for (std::size_t i = 0; i < n; ++i) e[i] -= d * q(i, o);
        }
      }
      double norm = 0.0;
      for (double x : e) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (std::size_t i = 0; i < n; ++i) q(i, c) = e[i] / norm;
        ++candidate;
        break;
      }
    }
  }
}

/// One-sided Jacobi on a tall (rows >= cols) matrix.
inline Svd jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix w = a;
  Matrix v = Matrix::identity(n);
  constexpr double tol = 1e-15;
  double norm2 = 0.0;
  for (double x : a.values()) norm2 += x * x;
  // Columns at roundoff level relative to the whole matrix are treated as zero.
  const double negligible = tol * tol * norm2;
  bool converged = false;
  for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        if (alpha <= negligible || beta <= negligible) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw ConvergenceError("one-sided Jacobi SVD did not converge");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  Svd out;
  out.singular_values.resize(n);
  out.u = Matrix(m, n);
  out.v = Matrix(n, n);
  const double smax = n ? sigma[order[0]] : 0.0;
  std::vector<bool> fill(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.singular_values[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    if (sigma[j] <= 1e-14 * std::max(1.0, smax)) {
      fill[k] = true;
      continue;
    }
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w(i, j) / sigma[j];
  }
  complete_orthonormal_columns(out.u, fill);
  return out;
}

}  // namespace detail

/// Thin SVD a = u · diag(s) · vᵀ for matrices up to 64 x 64.
inline Svd svd_small(const Matrix& a) {
  if (a.rows() > detail::kSvdMaxDim || a.cols() > detail::kSvdMaxDim)
    throw ShapeError("svd_small limited to 64x64", a.rows(), a.cols(), detail::kSvdMaxDim,
                     detail::kSvdMaxDim);
  if (a.rows() >= a.cols()) return detail::jacobi_svd_tall(a);
  Svd t = detail::jacobi_svd_tall(transpose(a));
  std::swap(t.u, t.v);
  return t;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline SymmetricEigen symmetric_eigen(const Matrix& s) {
  if (s.rows() != s.cols()) throw ShapeError("symmetric_eigen", s.rows(), s.cols(), s.cols(), s.rows());
  const std::size_t n = s.rows();
  Matrix a = s;
  Matrix v = Matrix::identity(n);
  bool converged = false;
  for (int sweep = 0; sweep < detail::kJacobiMaxSweeps && !converged; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= 1e-30 * std::max(diag, 1e-300)) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) throw ConvergenceError("Jacobi eigendecomposition did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of a matrix.
template <typename F>
Matrix finite_diff_grad(F&& f, const Matrix& x, double eps) {
  if (!(eps > 0.0)) throw Error("finite_diff_grad requires eps > 0");
  Matrix probe = x;
  Matrix grad(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double orig = probe(r, c);
      probe(r, c) = orig + eps;
      const double fp = f(static_cast<const Matrix&>(probe));
      probe(r, c) = orig - eps;
      const double fm = f(static_cast<const Matrix&>(probe));
      probe(r, c) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw ProbeError(r, c);
      grad(r, c) = (fp - fm) / (2.0 * eps);
    }
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps roundoff on vanishing
/// gradients from reading as relative error.
inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace aanet
