#include "pq/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace pq {

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw Error("tensor extent must be positive, got shape " + shape_to_string(shape));
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw Error("data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_to_string(shape_));
  }
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

Tensor Tensor::reshape(std::vector<int> shape) const {
  if (shape_numel(shape) != size()) {
    throw Error("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

void Tensor::check_finite(const std::string& context) const {
  for (float v : data_) {
    if (!std::isfinite(v)) throw Error("non-finite value in " + context);
  }
}

// ---- Rng -----------------------------------------------------------------

uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int Rng::next_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

Tensor Rng::normal_tensor(std::vector<int> shape, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(mean + stddev * normal());
  }
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(uniform(lo, hi));
  return t;
}

Rng Rng::fork(uint64_t tag) const {
  Rng child(state_ ^ (0xd1342543de82ef95ULL * (tag + 1)));
  child.next_u64();
  return child;
}

// ---- primitives ------------------------------------------------------------

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<const MatF>;

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw Error("matmul shape mismatch: " + shape_to_string(a.shape()) + " * " +
                shape_to_string(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  MapF ma(a.data(), m, k);
  MapF mb(b.data(), k, n);
  Eigen::MatrixXd cd = ma.cast<double>() * mb.cast<double>();
  Tensor out({m, n});
  Eigen::Map<MatF>(out.data(), m, n) = cd.cast<float>();
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw Error("softmax_rows expects 2-d input, got " + shape_to_string(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = x(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max<double>(mx, x(i, j));
    double sum = 0.0;
    std::vector<double> e(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(x(i, j)) - mx);
      sum += e[j];
    }
    for (int j = 0; j < n; ++j) out(i, j) = static_cast<float>(e[j] / sum);
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& g, float eps) {
  if (x.ndim() != 2 || g.ndim() != 1 || g.dim(0) != x.dim(1)) {
    throw Error("rmsnorm shape mismatch: x " + shape_to_string(x.shape()) + ", g " +
                shape_to_string(g.shape()));
  }
  const int t = x.dim(0), c = x.dim(1);
  Tensor out({t, c});
  for (int i = 0; i < t; ++i) {
    double ss = 0.0;
    for (int j = 0; j < c; ++j) ss += static_cast<double>(x(i, j)) * x(i, j);
    double inv = 1.0 / std::sqrt(ss / c + static_cast<double>(eps));
    for (int j = 0; j < c; ++j) out(i, j) = static_cast<float>(x(i, j) * inv * g[j]);
  }
  return out;
}

Tensor rope_apply(const Tensor& x, int pos0, float theta) {
  if (x.ndim() != 2 || x.dim(1) % 2 != 0) {
    throw Error("rope_apply expects [T x even] input, got " + shape_to_string(x.shape()));
  }
  const int t = x.dim(0), d = x.dim(1);
  Tensor out({t, d});
  for (int i = 0; i < t; ++i) {
    const int pos = pos0 + i;
    for (int p = 0; p < d / 2; ++p) {
      double freq = std::pow(static_cast<double>(theta), -2.0 * p / d);
      double ang = pos * freq;
      double c = std::cos(ang), s = std::sin(ang);
      double a = x(i, 2 * p), b = x(i, 2 * p + 1);
      out(i, 2 * p) = static_cast<float>(a * c - b * s);
      out(i, 2 * p + 1) = static_cast<float>(a * s + b * c);
    }
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = x[i];
    out[i] = static_cast<float>(v / (1.0 + std::exp(-v)));
  }
  return out;
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                shape_to_string(b.shape()));
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  return out;
}

Tensor transpose2d(const Tensor& x) {
  if (x.ndim() != 2) throw Error("transpose2d expects 2-d input");
  Tensor out({x.dim(1), x.dim(0)});
  for (int i = 0; i < x.dim(0); ++i)
    for (int j = 0; j < x.dim(1); ++j) out(j, i) = x(i, j);
  return out;
}

int argmax(const Tensor& x) {
  int best = 0;
  for (int64_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = static_cast<int>(i);
  }
  return best;
}

float median(const std::vector<float>& v) {
  if (v.empty()) throw Error("median of empty vector");
  std::vector<float> s(v);
  size_t idx = (s.size() - 1) / 2;  // lower median for even counts
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(idx), s.end());
  return s[idx];
}

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

}  // namespace pq
