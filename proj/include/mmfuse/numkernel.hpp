// Dense numeric substrate: vectors, row-major matrices, stable softmax,
// relu, argmax and a seeded portable PRNG.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmfuse {

/// Thrown when operand shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vector = std::vector<double>;

/// Length-K nonnegative vector summing to one.
using ProbDist = Vector;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      std::ostringstream os;
      os << "matrix data length " << data_.size() << " does not match shape ["
         << rows_ << ", " << cols_ << "]";
      throw ShapeError(os.str());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// out[i] = sum_j m(i, j) * v[j]
inline Vector matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) {
    std::ostringstream os;
    os << "matvec: matrix is [" << m.rows() << ", " << m.cols()
       << "] but vector has length " << v.size();
    throw ShapeError(os.str());
  }
  Vector out(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * v[j];
    out[i] = acc;
  }
  return out;
}

/// out[j] = sum_i m(i, j) * v[i]
inline Vector matvec_transposed(const Matrix& m, std::span<const double> v) {
  if (m.rows() != v.size()) {
    std::ostringstream os;
    os << "matvec_transposed: matrix is [" << m.rows() << ", " << m.cols()
       << "] but vector has length " << v.size();
    throw ShapeError(os.str());
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] * v[i];
  }
  return out;
}

/// Max-shifted softmax; never overflows for finite input.
inline ProbDist softmax(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("softmax: empty input");
  const double shift = *std::max_element(z.begin(), z.end());
  ProbDist out(z.size());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = std::exp(z[j] - shift);
    total += out[j];
  }
  for (double& p : out) p /= total;
  return out;
}

struct ReluResult {
  Vector out;
  Vector mask;  // 1 where the input was strictly positive
};

inline ReluResult relu(std::span<const double> v) {
  ReluResult r{Vector(v.size()), Vector(v.size())};
  for (std::size_t j = 0; j < v.size(); ++j) {
    const bool on = v[j] > 0.0;
    r.out[j] = on ? v[j] : 0.0;
    r.mask[j] = on ? 1.0 : 0.0;
  }
  return r;
}

/// Index of the maximum; ties go to the lowest index.
inline std::size_t argmax_first(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax_first: empty input");
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = j;
  return best;
}

/// xorshift64* generator (Vigna 2014: shifts 12/25/27, multiplier
/// 0x2545F4914F6CDD1D). The seed is mixed through one splitmix64 round so
/// that small or zero seeds still give a nonzero, well-spread state.
///
/// Stream order: every draw consumes exactly one 64-bit output, except
/// gaussian(), which consumes two outputs per pair of normals and caches the
/// second value of the pair for the next call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
  }

  std::uint64_t next_u64() noexcept {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool coin() noexcept { return (next_u64() >> 63) != 0; }

  /// Standard normal via the Box-Muller transform.
  double gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  static std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Vector rng_gaussian(Rng& rng, std::size_t n) {
  Vector out(n);
  for (double& x : out) x = rng.gaussian();
  return out;
}

/// Fisher-Yates shuffle driven by Rng.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace mmfuse
