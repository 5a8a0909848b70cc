#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pq {

/// Error type for all recoverable failures (shape mismatches, parse errors,
/// invalid configuration). Carries a human-readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_to_string(const std::vector<int>& shape);

/// Dense row-major f32 tensor. The universal value carrier: activations,
/// weights, statistics. Values are stored flat; shape gives the logical
/// n-d extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor full(std::vector<int> shape, float value);
  static Tensor identity(int n);

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  float& operator()(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  const float& operator()(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  float& operator()(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  const float& operator()(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  /// Reinterprets the flat data under a new shape with the same element count.
  Tensor reshape(std::vector<int> shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool bit_equal(const Tensor& other) const;

  /// Rejects NaN/Inf; used when ingesting external data (file loads).
  void check_finite(const std::string& context) const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

/// Counter-style seeded generator (splitmix64). Identical seed gives an
/// identical stream on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller.
  double normal();
  int next_int(int n);  // uniform in [0, n)

  Tensor normal_tensor(std::vector<int> shape, double mean, double stddev);
  Tensor uniform_tensor(std::vector<int> shape, double lo, double hi);

  /// Derives an independent stream; deterministic in (seed, tag).
  Rng fork(uint64_t tag) const;

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---- numeric primitives ------------------------------------------------
// All accumulate in double and store f32.

/// Matrix product a[m x k] * b[k x n]. Throws on inner-dimension mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Row-wise softmax with per-row max subtraction. Rows sum to 1.
Tensor softmax_rows(const Tensor& x);

/// Per-token RMS normalization: x / sqrt(mean(x^2) + eps) * g.
Tensor rmsnorm(const Tensor& x, const Tensor& g, float eps);

/// Rotary position embedding over the last extent (adjacent pairs),
/// pair p rotated by angle pos * theta^(-2p/dim). `pos0` is the absolute
/// position of row 0. x is [T x dim] (applied per row).
Tensor rope_apply(const Tensor& x, int pos0, float theta);

Tensor silu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor transpose2d(const Tensor& x);

int argmax(const Tensor& x);

/// Lower median: for even counts, the smaller of the two middle order
/// statistics.
float median(const std::vector<float>& v);

/// Mean squared error with 64-bit accumulation.
double mse(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace pq
