#pragma once

// Dense float32 kernel: row-major matrices, matmul, cosine similarity,
// softmax, layer norm, GELU and a splitmix64 generator. Accumulations run
// in double and are rounded to float once per output element.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "algm/errors.hpp"

namespace algm {

inline constexpr double kCosineEps = 1e-8;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0F)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows_, cols_));
    }
  }

  // Nested-list literal, mostly for tests: Matrix::from_rows({{1, 2}, {3, 4}}).
  static Matrix from_rows(const std::vector<std::vector<float>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw ShapeError("ragged rows in matrix literal");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool operator==(const Matrix&) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// splitmix64. The sequence is fixed by the algorithm alone, so fixtures built
// from a seed reproduce on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Uses modulo reduction; the bias is below 2^-40
  // for every n this project draws.
  std::size_t index(std::size_t n) noexcept {
    return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n);
  }

  // Standard normal via Box-Muller (the cosine branch only).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// Internal parallelism for matmul. Results are bit-identical for every
// thread count because rows are partitioned, never reductions.
namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> threads{1};
  return threads;
}

inline bool& in_worker() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

inline void set_threads(unsigned n) { detail::thread_setting().store(std::max(1U, n)); }
// Threads available to kernels on the calling thread; 1 inside workers that
// already parallelize at a coarser level.
inline unsigned threads() { return detail::in_worker() ? 1U : detail::thread_setting().load(); }

// Marks the current thread as a worker for its lifetime.
class WorkerScope {
 public:
  WorkerScope() : prev_(detail::in_worker()) { detail::in_worker() = true; }
  ~WorkerScope() { detail::in_worker() = prev_; }
  WorkerScope(const WorkerScope&) = delete;
  WorkerScope& operator=(const WorkerScope&) = delete;

 private:
  bool prev_;
};

namespace detail {

// out rows [r0, r1) of a*b (+ bias).
inline void matmul_rows(const Matrix& a, const Matrix& b, std::span<const float> bias,
                        Matrix& out, std::size_t r0, std::size_t r1) {
  const std::size_t inner = a.cols();
  const std::size_t cols = b.cols();
  std::vector<double> acc(cols * 4);
  std::size_t i = r0;
  for (; i + 4 <= r1; i += 4) {
    double* c0 = acc.data();
    double* c1 = c0 + cols;
    double* c2 = c1 + cols;
    double* c3 = c2 + cols;
    for (std::size_t j = 0; j < cols; ++j) {
      const double init = bias.empty() ? 0.0 : static_cast<double>(bias[j]);
      c0[j] = init;
      c1[j] = init;
      c2[j] = init;
      c3[j] = init;
    }
    for (std::size_t k = 0; k < inner; ++k) {
      const double a0 = a(i, k);
      const double a1 = a(i + 1, k);
      const double a2 = a(i + 2, k);
      const double a3 = a(i + 3, k);
      const float* brow = b.row(k).data();
      for (std::size_t j = 0; j < cols; ++j) {
        const double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
    for (std::size_t r = 0; r < 4; ++r) {
      auto dst = out.row(i + r);
      const double* src = acc.data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] = static_cast<float>(src[j]);
    }
  }
  for (; i < r1; ++i) {
    double* c0 = acc.data();
    for (std::size_t j = 0; j < cols; ++j) c0[j] = bias.empty() ? 0.0 : static_cast<double>(bias[j]);
    for (std::size_t k = 0; k < inner; ++k) {
      const double a0 = a(i, k);
      const float* brow = b.row(k).data();
      for (std::size_t j = 0; j < cols; ++j) c0[j] += a0 * static_cast<double>(brow[j]);
    }
    auto dst = out.row(i);
    for (std::size_t j = 0; j < cols; ++j) dst[j] = static_cast<float>(c0[j]);
  }
}

}  // namespace detail

// a*b, plus an optional bias row broadcast over the output rows.
inline Matrix matmul(const Matrix& a, const Matrix& b, std::span<const float> bias = {}) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + a.shape() + " x " + b.shape());
  }
  if (!bias.empty() && bias.size() != b.cols()) {
    throw ShapeError("matmul bias length " + std::to_string(bias.size()) + " does not match " +
                     b.shape());
  }
  Matrix out(a.rows(), b.cols());
  const unsigned n_threads = threads();
  // Blocks of 4 rows keep the microkernel identical regardless of split.
  const std::size_t blocks = (a.rows() + 3) / 4;
  if (n_threads <= 1 || blocks < 2) {
    detail::matmul_rows(a, b, bias, out, 0, a.rows());
    return out;
  }
  const std::size_t workers = std::min<std::size_t>(n_threads, blocks);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t r0 = std::min(a.rows(), (blocks * w / workers) * 4);
    const std::size_t r1 = std::min(a.rows(), (blocks * (w + 1) / workers) * 4);
    pool.emplace_back([&, r0, r1] { detail::matmul_rows(a, b, bias, out, r0, r1); });
  }
  for (auto& t : pool) t.join();
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline double dot(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    throw ShapeError("dot length mismatch: " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += static_cast<double>(u[i]) * v[i];
  return s;
}

inline double norm(std::span<const float> u) { return std::sqrt(dot(u, u)); }

// Cosine from precomputed pieces; the denominator is floored at eps so a zero
// vector is orthogonal to everything.
inline double cosine_from_parts(double uv, double norm_u, double norm_v,
                                double eps = kCosineEps) {
  const double c = uv / std::max(norm_u * norm_v, eps);
  return std::clamp(c, -1.0, 1.0);
}

inline double cosine_sim(std::span<const float> u, std::span<const float> v,
                         double eps = kCosineEps) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_sim length mismatch: " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  if (!(eps > 0.0)) throw ArgumentError("cosine_sim eps must be positive");
  return cosine_from_parts(dot(u, v), norm(u), norm(v), eps);
}

inline std::vector<double> row_norms(const Matrix& t) {
  std::vector<double> n(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) n[i] = norm(t.row(i));
  return n;
}

// Symmetric N x N cosine matrix; entry (i, j) equals cosine_sim(row i, row j)
// rounded to float.
inline Matrix pairwise_cosine(const Matrix& t) {
  const auto norms = row_norms(t);
  Matrix s(t.rows(), t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = i; j < t.rows(); ++j) {
      const auto c = static_cast<float>(cosine_from_parts(dot(t.row(i), t.row(j)), norms[i], norms[j]));
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  return s;
}

inline void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  const float mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  std::vector<double> e(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    e[j] = std::exp(static_cast<double>(row[j]) - mx);
    total += e[j];
  }
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<float>(e[j] / total);
}

inline Matrix softmax_rows(const Matrix& t) {
  Matrix out = t;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

inline Matrix layer_norm(const Matrix& t, std::span<const float> gain, std::span<const float> bias,
                         double eps = 1e-6) {
  if (gain.size() != t.cols() || bias.size() != t.cols()) {
    throw ShapeError("layer_norm expects gain/bias of length " + std::to_string(t.cols()) +
                     ", got " + std::to_string(gain.size()) + "/" + std::to_string(bias.size()));
  }
  Matrix out(t.rows(), t.cols());
  const auto d = static_cast<double>(t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const auto r = t.row(i);
    double mean = 0.0;
    for (float v : r) mean += v;
    mean /= d;
    double var = 0.0;
    for (float v : r) var += (v - mean) * (v - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      o[j] = static_cast<float>((r[j] - mean) * inv * gain[j] + bias[j]);
    }
  }
  return out;
}

// Exact (erf) GELU.
inline float gelu(float x) {
  const double v = x;
  return static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
}

inline void add_inplace(Matrix& dst, const Matrix& src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw ShapeError("add shape mismatch: " + dst.shape() + " + " + src.shape());
  }
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Rows [r0, r0+n) and columns [c0, c0+m) as a new matrix.
inline Matrix slice(const Matrix& t, std::size_t r0, std::size_t n, std::size_t c0, std::size_t m) {
  if (r0 + n > t.rows() || c0 + m > t.cols()) throw ShapeError("slice out of range of " + t.shape());
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = t.row(r0 + i).subspan(c0, m);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline bool all_finite(const Matrix& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace algm
