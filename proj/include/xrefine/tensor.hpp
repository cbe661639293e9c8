#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace xrefine {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contract violations on tensor/matrix dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// Malformed or unusable input data (files, match lists, configs).
struct DataError : Error {
  using Error::Error;
};

// Non-finite values, degenerate configurations, failed estimations.
struct NumericalError : Error {
  using Error::Error;
};

/// Dense n-dimensional array with row-major storage. The scalar type is a
/// template parameter: float is used for training and inference, double for
/// finite-difference gradient checking of the very same code paths.
template <class S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(count(t.shape)), S(0));
    return t;
  }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<S> values) {
    if (count(shape) != static_cast<long>(values.size()))
      throw ShapeError("tensor data length does not match shape");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
  }

  static long count(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  long size() const { return static_cast<long>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  S& operator()(int i) { return data[static_cast<size_t>(i)]; }
  S operator()(int i) const { return data[static_cast<size_t>(i)]; }
  S& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  S operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  S& operator()(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S operator()(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S& operator()(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  S operator()(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  void fill(S value) { std::fill(data.begin(), data.end(), value); }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }

  // Row-major Eigen views; rows*cols must cover the whole buffer.
  using MatrixMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  MatrixMap as_matrix(int rows, int cols) {
    if (static_cast<long>(rows) * cols != size())
      throw ShapeError("matrix view does not cover tensor");
    return MatrixMap(data.data(), rows, cols);
  }
  ConstMatrixMap as_matrix(int rows, int cols) const {
    if (static_cast<long>(rows) * cols != size())
      throw ShapeError("matrix view does not cover tensor");
    return ConstMatrixMap(data.data(), rows, cols);
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

/// Deterministic seedable PRNG (splitmix64). All randomness in the project
/// flows through this type so that runs are reproducible bit-for-bit; no
/// standard-library distributions are used because their output is
/// implementation-defined.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n), unbiased.
  uint64_t below(uint64_t n) {
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Derives an independent stream seed from (seed, tag). Used to give every
  /// sample/pair/epoch its own deterministic stream:
  ///   mixed = splitmix64_output(seed XOR (tag * 0xD1B54A32D192ED03 + 0x8CB92BA72F3D8DD7))
  static uint64_t mix(uint64_t seed, uint64_t tag) {
    uint64_t z = seed ^ (tag * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull);
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
};

}  // namespace xrefine
