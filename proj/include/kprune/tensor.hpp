// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major matrices and the handful of kernels the encoder needs.
// Element storage is a template parameter (float for checkpoints, double
// for verification); every reduction accumulates in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kprune/error.hpp"

namespace kprune {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows * cols,
                    "Matrix: data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      detail::require(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
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

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename U, typename T>
Matrix<U> cast(const Matrix<T>& m) {
  std::vector<U> out(m.values().begin(), m.values().end());
  return Matrix<U>(m.rows(), m.cols(), std::move(out));
}

template <typename U, typename T>
std::vector<U> cast(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return all_finite(std::span<const T>(m.values()));
}

/// a * b.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(),
                  "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  Matrix<T> out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const T* brow = b.data() + k * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

/// a * b^T.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.data() + i * a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* brow = b.data() + j * b.cols();
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k)
        acc += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

/// a^T * b.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn: inner dimensions differ");
  Matrix<double> acc(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      const T* brow = b.data() + k * b.cols();
      double* orow = acc.data() + i * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * static_cast<double>(brow[j]);
    }
  }
  return cast<T>(acc);
}

template <typename T>
double frobenius_sq(const Matrix<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  detail::require(a.size() == b.size(), "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

/// Row-wise softmax of a / temperature, max-subtracted.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a, double temperature = 1.0) {
  detail::require(temperature > 0.0, "softmax_rows: temperature must be positive");
  Matrix<T> out(a.rows(), a.cols());
  std::vector<double> e(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    if (r.empty()) continue;
    const double mx = static_cast<double>(*std::max_element(r.begin(), r.end()));
    double sum = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      e[j] = std::exp((static_cast<double>(r[j]) - mx) / temperature);
      sum += e[j];
    }
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = static_cast<T>(e[j] / sum);
  }
  return out;
}

/// Log-softmax of a single logit vector at the given temperature, in double.
template <typename T>
std::vector<double> log_softmax(std::span<const T> logits, double temperature = 1.0) {
  detail::require(temperature > 0.0, "log_softmax: temperature must be positive");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double mx = -INFINITY;
  for (T v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) / temperature - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(logits[i]) / temperature - lse;
  return out;
}

/// Per-row (per-token) layer normalization over the embedding axis.
template <typename T>
Matrix<T> layernorm(const Matrix<T>& x, std::span<const T> gain, std::span<const T> shift,
                    double eps) {
  detail::require(gain.size() == x.cols() && shift.size() == x.cols(),
                  "layernorm: gain/shift length " + std::to_string(gain.size()) + "/" +
                      std::to_string(shift.size()) + " != embedding dim " +
                      std::to_string(x.cols()));
  Matrix<T> out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (T v : r) mean += static_cast<double>(v);
    mean /= n;
    double var = 0.0;
    for (T v : r) {
      const double c = static_cast<double>(v) - mean;
      var += c * c;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < r.size(); ++j)
      out(i, j) = static_cast<T>(static_cast<double>(gain[j]) *
                                     ((static_cast<double>(r[j]) - mean) * rstd) +
                                 static_cast<double>(shift[j]));
  }
  return out;
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

/// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct LstsqSolution {
  Matrix<double> solution;
  bool rank_deficient = false;
  double ridge = 0.0;  // ridge actually applied
};

namespace detail {

inline Eigen::MatrixXd to_eigen(const Matrix<double>& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Matrix<double> from_eigen(const Eigen::MatrixXd& m) {
  Matrix<double> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline constexpr double kPivotRatioTolerance = 1e-10;
inline constexpr double kFallbackRidgeScale = 1e-8;

}  // namespace detail

/// Minimizes ||P W - Q||_F^2 + ridge ||W||_F^2.
///
/// Column-pivoted Householder QR. When the pivot ratio |R_kk| / |R_00| drops
/// below 1e-10 and no ridge was requested, the problem is re-solved with
/// ridge = 1e-8 * mean(diag(P^T P)), which approaches the minimum-norm
/// solution.
template <typename T>
LstsqSolution lstsq_solve(const Matrix<T>& p, const Matrix<T>& q, double ridge = 0.0) {
  detail::require(p.rows() == q.rows(), "lstsq: P has " + std::to_string(p.rows()) +
                                            " rows but Q has " + std::to_string(q.rows()));
  detail::require(ridge >= 0.0, "lstsq: ridge must be nonnegative");
  LstsqSolution result;
  const std::size_t k = p.cols();
  result.solution = Matrix<double>(k, q.cols());
  if (k == 0 || q.cols() == 0) return result;

  const Eigen::MatrixXd pe = detail::to_eigen(cast<double>(p));
  const Eigen::MatrixXd qe = detail::to_eigen(cast<double>(q));

  double applied = ridge;
  if (applied == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(pe);
    const Eigen::MatrixXd& r = qr.matrixQR();
    const Eigen::Index diag = std::min(r.rows(), r.cols());
    const double lead = diag > 0 ? std::abs(r(0, 0)) : 0.0;
    bool deficient = diag < static_cast<Eigen::Index>(k) || lead == 0.0;
    for (Eigen::Index i = 0; !deficient && i < diag; ++i)
      deficient = std::abs(r(i, i)) < detail::kPivotRatioTolerance * lead;
    if (!deficient) {
      result.solution = detail::from_eigen(qr.solve(qe));
      return result;
    }
    result.rank_deficient = true;
    const double mean_diag = pe.colwise().squaredNorm().mean();
    if (mean_diag == 0.0) return result;  // P == 0: minimum-norm solution is 0
    applied = detail::kFallbackRidgeScale * mean_diag;
  }

  Eigen::MatrixXd aug(pe.rows() + static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  aug.topRows(pe.rows()) = pe;
  aug.bottomRows(k) = std::sqrt(applied) * Eigen::MatrixXd::Identity(k, k);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(aug.rows(), qe.cols());
  rhs.topRows(qe.rows()) = qe;
  result.solution = detail::from_eigen(aug.colPivHouseholderQr().solve(rhs));
  result.ridge = applied;
  return result;
}

template <typename T>
Matrix<double> lstsq(const Matrix<T>& p, const Matrix<T>& q, double ridge = 0.0) {
  return lstsq_solve(p, q, ridge).solution;
}

}  // namespace kprune
