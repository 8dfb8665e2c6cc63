#pragma once

// Dense row-major matrices, rank-3 tensors, power-iteration spectral norms,
// cyclic Jacobi eigendecomposition and LU log-determinants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grf/error.hpp"
#include "grf/random.hpp"

namespace grf {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: entry count " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
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

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<double>& values() const { return data_; }

  // Same storage, new shape.
  Matrix reshaped(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data_.size()) throw ShapeError("Matrix::reshaped: entry count mismatch");
    return Matrix(rows, cols, data_);
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  bool operator==(const Matrix& o) const = default;

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  void require_same_shape(const Matrix& o, const char* what) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("Matrix::") + what + ": shape mismatch " +
                       std::to_string(rows_) + "x" + std::to_string(cols_) + " vs " +
                       std::to_string(o.rows_) + "x" + std::to_string(o.cols_));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Dense d1 x d2 x d3 tensor with index (i, j, k) -> (i * d2 + j) * d3 + k.
// Row-major storage means reshaping to (d1, d2*d3) or (d1*d2, d3) is free.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t d1, std::size_t d2, std::size_t d3, double fill = 0.0)
      : d1_(d1), d2_(d2), d3_(d3), data_(d1 * d2 * d3, fill) {}
  Tensor3(std::size_t d1, std::size_t d2, std::size_t d3, std::vector<double> data)
      : d1_(d1), d2_(d2), d3_(d3), data_(std::move(data)) {
    if (data_.size() != d1_ * d2_ * d3_) throw ShapeError("Tensor3: entry count mismatch");
  }

  std::size_t dim1() const { return d1_; }
  std::size_t dim2() const { return d2_; }
  std::size_t dim3() const { return d3_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * d2_ + j) * d3_ + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * d2_ + j) * d3_ + k];
  }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  Matrix as_matrix(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data_.size()) throw ShapeError("Tensor3::as_matrix: entry count mismatch");
    return Matrix(rows, cols, data_);
  }
  static Tensor3 from_matrix(const Matrix& m, std::size_t d1, std::size_t d2, std::size_t d3) {
    return Tensor3(d1, d2, d3, m.values());
  }

  bool operator==(const Tensor3& o) const = default;

 private:
  std::size_t d1_ = 0, d2_ = 0, d3_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Products

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("hadamard: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("frobenius_dot: shape mismatch");
  return dot(a.flat(), b.flat());
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }
inline double frobenius_norm(const Matrix& a) { return norm2(a.flat()); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
  return t;
}

// ---------------------------------------------------------------------------
// Spectral norm by power iteration

struct SpectralNormState {
  std::vector<double> u;  // left singular estimate, length rows
  std::vector<double> v;  // right singular estimate, length cols
  double sigma_estimate = 0.0;
  int iterations_per_step = 1;

  SpectralNormState() = default;
  SpectralNormState(std::size_t rows, std::size_t cols, std::uint64_t seed) : u(rows), v(cols) {
    Rng gen(seed);
    NormalSampler nd;
    for (double& x : u) x = nd(gen);
    for (double& x : v) x = nd(gen);
    normalize(u);
    normalize(v);
  }

  static void normalize(std::vector<double>& x) {
    const double n = norm2(x);
    if (n > 0.0) {
      for (double& e : x) e /= n;
    } else if (!x.empty()) {
      x.assign(x.size(), 1.0 / std::sqrt(static_cast<double>(x.size())));
    }
  }

  bool operator==(const SpectralNormState&) const = default;
};

// A linear map given by its action and the action of its transpose. Lets the
// power iteration run on factored weights (U V^T) without materialising them.
struct LinearOperator {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::function<std::vector<double>(std::span<const double>)> apply;            // x (cols) -> Wx
  std::function<std::vector<double>(std::span<const double>)> apply_transpose;  // y (rows) -> W^T y

  static LinearOperator dense(const Matrix& w) {
    LinearOperator op;
    op.rows = w.rows();
    op.cols = w.cols();
    op.apply = [&w](std::span<const double> x) {
      std::vector<double> y(w.rows(), 0.0);
      for (std::size_t i = 0; i < w.rows(); ++i) y[i] = dot(w.row(i), x);
      return y;
    };
    op.apply_transpose = [&w](std::span<const double> y) {
      std::vector<double> x(w.cols(), 0.0);
      for (std::size_t i = 0; i < w.rows(); ++i) {
        auto wr = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) x[j] += wr[j] * y[i];
      }
      return x;
    };
    return op;
  }
};

// Runs `iterations` warm-started power iterations. sigma = ||W v|| is
// non-decreasing across iterations for a fixed operator.
inline double power_iterate(const LinearOperator& w, SpectralNormState& state, int iterations) {
  if (state.u.size() != w.rows || state.v.size() != w.cols) {
    state = SpectralNormState(w.rows, w.cols, 0x5eedULL + w.rows * 131 + w.cols);
  }
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> wv = w.apply(state.v);
    const double n_wv = norm2(wv);
    if (n_wv == 0.0) {
      // Either W = 0 or v is in the null space; both give no progress here.
      std::vector<double> wtu = w.apply_transpose(state.u);
      if (norm2(wtu) == 0.0) {
        state.sigma_estimate = 0.0;
        return 0.0;
      }
      state.v = std::move(wtu);
      SpectralNormState::normalize(state.v);
      continue;
    }
    std::vector<double> u_new = std::move(wv);
    for (double& x : u_new) x /= n_wv;
    std::vector<double> wtu = w.apply_transpose(u_new);
    const double n_wtu = norm2(wtu);
    state.u = std::move(u_new);
    for (double& x : wtu) x /= n_wtu;
    state.v = std::move(wtu);
    // ||W^T u|| after the u update is >= ||W v_old||; report ||W v_new||.
    sigma = n_wtu;
  }
  state.sigma_estimate = sigma;
  return sigma;
}

// Warm-started power iteration that keeps going past `min_iterations` until the
// estimate settles to `rel_tol` or `max_iterations` is reached.
inline double power_iterate_until(const LinearOperator& w, SpectralNormState& state,
                                  int min_iterations, double rel_tol = 1e-12,
                                  int max_iterations = 2000) {
  double sigma = power_iterate(w, state, std::max(1, min_iterations));
  for (int it = std::max(1, min_iterations); it < max_iterations; ++it) {
    const double prev = sigma;
    sigma = power_iterate(w, state, 1);
    if (sigma == 0.0 || std::abs(sigma - prev) <= rel_tol * sigma) break;
  }
  return sigma;
}

struct SpectralNormResult {
  double sigma;
  SpectralNormState state;
};

// Largest singular value of w. A zero matrix yields sigma = 0 and leaves the
// singular vector estimates untouched.
inline SpectralNormResult spectral_norm(const Matrix& w, SpectralNormState state,
                                        int iterations = 0) {
  const int iters = iterations > 0 ? iterations : std::max(1, state.iterations_per_step);
  const bool zero = std::all_of(w.flat().begin(), w.flat().end(), [](double x) { return x == 0.0; });
  if (zero) {
    if (state.u.size() != w.rows() || state.v.size() != w.cols()) {
      state = SpectralNormState(w.rows(), w.cols(), 0x5eedULL);
    }
    state.sigma_estimate = 0.0;
    return {0.0, std::move(state)};
  }
  const double sigma = power_iterate(LinearOperator::dense(w), state, iters);
  return {sigma, std::move(state)};
}

// w * min(1, bound / sigma). The estimate is refined to convergence so the
// result respects the bound up to the power-iteration accuracy.
inline Matrix normalize_to_bound(const Matrix& w, double bound, SpectralNormState& state) {
  if (!(bound > 0.0)) throw std::invalid_argument("normalize_to_bound: bound must be positive");
  const bool zero = std::all_of(w.flat().begin(), w.flat().end(), [](double x) { return x == 0.0; });
  if (zero) {
    state.sigma_estimate = 0.0;
    return w;
  }
  const double sigma =
      power_iterate_until(LinearOperator::dense(w), state, std::max(1, state.iterations_per_step));
  if (sigma <= bound) return w;
  state.sigma_estimate = bound;
  return w * (bound / sigma);
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column k is the unit eigenvector of values[k]
};

inline SymmetricEigen sym_eigen(const Matrix& s, double symmetry_tol = 1e-9, bool want_vectors = true) {
  if (s.rows() != s.cols()) throw ShapeError("sym_eigen: matrix is not square");
  const std::size_t n = s.rows();
  double scale = 0.0;
  for (double x : s.flat()) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > symmetry_tol * std::max(1.0, scale)) {
        throw std::invalid_argument("sym_eigen: input is not symmetric");
      }

  Matrix a = s;
  Matrix v = want_vectors ? Matrix::identity(n) : Matrix();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off <= 1e-30 * std::max(1.0, scale * scale)) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
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
        for (std::size_t k = 0; want_vectors && k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  if (want_vectors) out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; want_vectors && i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

inline std::vector<double> sym_eigenvalues(const Matrix& s) { return sym_eigen(s, 1e-9, false).values; }

// ---------------------------------------------------------------------------
// log|det| via LU with partial pivoting

struct LogAbsDet {
  double value;   // -inf when singular
  bool singular;
};

inline LogAbsDet exact_logabsdet(const Matrix& j) {
  if (j.rows() != j.cols()) throw ShapeError("exact_logabsdet: matrix is not square");
  const std::size_t n = j.rows();
  Matrix lu = j;
  double logdet = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (lu(piv, k) == 0.0) return {-std::numeric_limits<double>::infinity(), true};
    if (piv != k)
      for (std::size_t c = 0; c < n; ++c) std::swap(lu(k, c), lu(piv, c));
    const double d = lu(k, k);
    logdet += std::log(std::abs(d));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / d;
      if (f == 0.0) continue;
      for (std::size_t c = k + 1; c < n; ++c) lu(i, c) -= f * lu(k, c);
    }
  }
  return {logdet, false};
}

}  // namespace grf
