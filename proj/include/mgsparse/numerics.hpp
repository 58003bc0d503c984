#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

#include "mgsparse/common.hpp"

namespace mgsparse {

// All model math is float32. Dot products accumulate in ascending column
// order; parallelism only ever splits over whole output rows or whole
// samples, so serial and threaded runs agree bit for bit.

using Vector = std::vector<float>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  const float* row(std::size_t i) const { return data.data() + i * cols; }
};

// ---- MAC accounting ----
// Thread-local multiply-accumulate counter. Only the matvec family counts;
// bias adds and activation evaluations are aux ops and excluded.

inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline void reset_macs() { mac_counter() = 0; }
inline std::uint64_t macs() { return mac_counter(); }

// ---- matvec family ----

inline Vector matvec(const Matrix& m, const Vector& x) {
  require(x.size() == m.cols, errc::dim_mismatch,
          "matvec: x.len " + std::to_string(x.size()) + " != cols " + std::to_string(m.cols));
  Vector out(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* row = m.row(i);
    float acc = 0.0f;
    for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
    out[i] = acc;
  }
  mac_counter() += static_cast<std::uint64_t>(m.rows) * m.cols;
  return out;
}

// Rows with row_mask[i] == false are not computed at all: the output entry is
// exactly 0.0f and no MACs are spent on them.
inline Vector masked_matvec(const Matrix& m, const Vector& x, const std::vector<bool>& row_mask) {
  require(x.size() == m.cols, errc::dim_mismatch, "masked_matvec: x.len != cols");
  require(row_mask.size() == m.rows, errc::dim_mismatch, "masked_matvec: mask.len != rows");
  Vector out(m.rows, 0.0f);
  std::uint64_t active = 0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    if (!row_mask[i]) continue;
    const float* row = m.row(i);
    float acc = 0.0f;
    for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
    out[i] = acc;
    ++active;
  }
  mac_counter() += active * static_cast<std::uint64_t>(m.cols);
  return out;
}

// Skips columns whose mask entry is false. When x is exactly zero at every
// masked-out position this equals matvec bit for bit: the skipped terms would
// contribute signed zeros, and the ascending-j accumulator never leaves +0.0
// until a nonzero term lands, so dropping them cannot change any partial sum.
inline Vector column_pruned_matvec(const Matrix& m, const Vector& x,
                                   const std::vector<bool>& col_mask) {
  require(x.size() == m.cols, errc::dim_mismatch, "column_pruned_matvec: x.len != cols");
  require(col_mask.size() == m.cols, errc::dim_mismatch, "column_pruned_matvec: mask.len != cols");
  std::uint64_t active = 0;
  for (std::size_t j = 0; j < m.cols; ++j)
    if (col_mask[j]) ++active;
  Vector out(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* row = m.row(i);
    float acc = 0.0f;
    for (std::size_t j = 0; j < m.cols; ++j)
      if (col_mask[j]) acc += row[j] * x[j];
    out[i] = acc;
  }
  mac_counter() += static_cast<std::uint64_t>(m.rows) * active;
  return out;
}

// ---- activations ----
// relu maps every non-positive input to +0.0f, so downstream zero tests and
// signed-zero reasoning stay exact.

inline float relu(float x) { return x > 0.0f ? x : 0.0f; }

inline Vector relu(const Vector& x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = relu(x[i]);
  return out;
}

// Clamped to [eps, 1-eps] so BCE never evaluates log(0).
inline constexpr double kSigmoidEps = 1e-7;

inline float sigmoid(float x) {
  double p = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
  if (p < kSigmoidEps) p = kSigmoidEps;
  if (p > 1.0 - kSigmoidEps) p = 1.0 - kSigmoidEps;
  return static_cast<float>(p);
}

inline Vector sigmoid(const Vector& x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

inline void add_inplace(Vector& a, const Vector& b) {
  require(a.size() == b.size(), errc::dim_mismatch, "add: length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// ---- deterministic RNG ----
// xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D), seeded through
// one round of splitmix64. Normals come from a 12-term uniform sum, which uses
// only IEEE add/sub and therefore gives the same bits on every platform;
// libm's exp/log/cos make no such promise.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    state_ = z ^ (z >> 31);
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
  }

  std::uint64_t next_u64() {
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1Dull;
  }

  // [0, 1), 53 random bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Approximate standard normal: sum of 12 uniforms minus 6 (mean 0, variance
  // exactly 1, support [-6, 6]). Adequate for weight init and mixture draws.
  float normal() {
    double s = 0.0;
    for (int k = 0; k < 12; ++k) s += uniform();
    return static_cast<float>(s - 6.0);
  }

  std::size_t next_below(std::size_t n) {
    require(n > 0, errc::bad_argument, "Rng::next_below: n must be positive");
    return static_cast<std::size_t>(next_u64() % n);
  }

  // Fisher-Yates
  void shuffle(std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// ---- parallel_for ----
// Splits [0, total) into contiguous chunks, one per thread. Callers must
// write only to per-index slots so the result is independent of scheduling.

template <typename Func>
void parallel_for(std::size_t total, unsigned threads, Func&& func) {
  if (threads <= 1 || total <= 1) {
    func(std::size_t{0}, total);
    return;
  }
  if (threads > total) threads = static_cast<unsigned>(total);
  std::size_t chunk = total / threads;
  std::vector<std::thread> workers;
  workers.reserve(threads - 1);
  for (unsigned t = 0; t + 1 < threads; ++t)
    workers.emplace_back(func, t * chunk, (t + 1) * chunk);
  func((threads - 1) * chunk, total);
  for (auto& w : workers) w.join();
}

}  // namespace mgsparse
