#include "pq/rotation.hpp"

#include <cmath>
#include <cstring>

namespace pq {

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

HadamardSpec HadamardSpec::make(int dim, RotationSite site, uint64_t seed) {
  if (!is_power_of_two(dim)) {
    throw Error("Hadamard dim must be a power of two, got " + std::to_string(dim));
  }
  HadamardSpec spec;
  spec.dim = dim;
  spec.site = site;
  spec.sign_diag.resize(static_cast<size_t>(dim));
  Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(site) + 2)));
  for (int i = 0; i < dim; ++i) spec.sign_diag[i] = (rng.next_u64() & 1) ? 1.0f : -1.0f;
  return spec;
}

static void fwht_row(double* y, int n) {
  for (int h = 1; h < n; h <<= 1) {
    for (int i = 0; i < n; i += h << 1) {
      for (int j = i; j < i + h; ++j) {
        const double a = y[j], b = y[j + h];
        y[j] = a + b;
        y[j + h] = a - b;
      }
    }
  }
}

Tensor wht(const Tensor& x) {
  if (x.ndim() < 1) throw Error("wht needs at least one extent");
  const int n = x.dim(x.ndim() - 1);
  if (!is_power_of_two(n)) {
    throw Error("wht last extent must be a power of two, got " + std::to_string(n));
  }
  const int64_t rows = x.size() / n;
  const double inv = 1.0 / std::sqrt(static_cast<double>(n));
  Tensor out(x.shape());
  std::vector<double> buf(static_cast<size_t>(n));
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = x.data() + r * n;
    for (int j = 0; j < n; ++j) buf[j] = src[j];
    fwht_row(buf.data(), n);
    float* dst = out.data() + r * n;
    for (int j = 0; j < n; ++j) dst[j] = static_cast<float>(buf[j] * inv);
  }
  return out;
}

Tensor online_rotate(const Tensor& x, const HadamardSpec& spec) {
  const int n = x.dim(x.ndim() - 1);
  if (n != spec.dim) {
    throw Error("rotation dim " + std::to_string(spec.dim) + " does not match extent " +
                std::to_string(n));
  }
  Tensor flipped(x.shape());
  const int64_t rows = x.size() / n;
  for (int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < n; ++j) {
      flipped[r * n + j] = x[r * n + j] * spec.sign_diag[static_cast<size_t>(j)];
    }
  }
  return wht(flipped);
}

Tensor online_rotate_inverse(const Tensor& x, const HadamardSpec& spec) {
  const int n = x.dim(x.ndim() - 1);
  if (n != spec.dim) {
    throw Error("rotation dim " + std::to_string(spec.dim) + " does not match extent " +
                std::to_string(n));
  }
  Tensor t = wht(x);
  const int64_t rows = x.size() / n;
  for (int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < n; ++j) t[r * n + j] *= spec.sign_diag[static_cast<size_t>(j)];
  }
  return t;
}

Tensor materialize(const HadamardSpec& spec) {
  Tensor q = Tensor::identity(spec.dim);
  return online_rotate(q, spec);  // rows e_i * Q
}

}  // namespace pq

// ---- weight fusion -----------------------------------------------------------

namespace pq {

namespace {

// W * Q (rows of W rotated); inverse gives W * Q^T
Tensor right_mul(const Tensor& w, const HadamardSpec& spec, bool inverse) {
  return inverse ? online_rotate_inverse(w, spec) : online_rotate(w, spec);
}

// Q^T * W; inverse gives Q * W
Tensor left_mul_qt(const Tensor& w, const HadamardSpec& spec, bool inverse) {
  return transpose2d(right_mul(transpose2d(w), spec, inverse));
}

// Scales row i of w by g[i]; used to fold norm gains into the next linear.
Tensor fold_gain_rows(const Tensor& w, const Tensor& g) {
  Tensor out = w;
  for (int i = 0; i < w.dim(0); ++i) {
    for (int j = 0; j < w.dim(1); ++j) out(i, j) *= g[i];
  }
  return out;
}

Tensor head_block_right(const Tensor& w, const HadamardSpec& spec, int n_heads, bool inverse) {
  const int rows = w.dim(0), d = spec.dim;
  Tensor out = w;
  Tensor block({rows, d});
  for (int h = 0; h < n_heads; ++h) {
    for (int i = 0; i < rows; ++i) {
      std::memcpy(&block(i, 0), &out(i, h * d), static_cast<size_t>(d) * sizeof(float));
    }
    Tensor rotated = right_mul(block, spec, inverse);
    for (int i = 0; i < rows; ++i) {
      std::memcpy(&out(i, h * d), &rotated(i, 0), static_cast<size_t>(d) * sizeof(float));
    }
  }
  return out;
}

Tensor head_block_left_qt(const Tensor& w, const HadamardSpec& spec, int n_heads, bool inverse) {
  const int cols = w.dim(1), d = spec.dim;
  Tensor out = w;
  for (int h = 0; h < n_heads; ++h) {
    Tensor block({d, cols});
    std::memcpy(block.data(), out.data() + static_cast<int64_t>(h) * d * cols,
                static_cast<size_t>(d) * cols * sizeof(float));
    Tensor rotated = left_mul_qt(block, spec, inverse);
    std::memcpy(out.data() + static_cast<int64_t>(h) * d * cols, rotated.data(),
                static_cast<size_t>(d) * cols * sizeof(float));
  }
  return out;
}

}  // namespace

/// Folds all norm gains into the adjacent linears, leaving gains at 1.
/// Prerequisite for R1: rmsnorm with unit gain commutes with any orthogonal
/// rotation of the residual stream.
static ToyModel fold_norm_gains(const ToyModel& model) {
  ToyModel m = model;
  for (auto& w : m.layers) {
    w.q_proj = fold_gain_rows(w.q_proj, w.input_norm);
    w.k_proj = fold_gain_rows(w.k_proj, w.input_norm);
    w.v_proj = fold_gain_rows(w.v_proj, w.input_norm);
    w.gate_proj = fold_gain_rows(w.gate_proj, w.post_norm);
    w.up_proj = fold_gain_rows(w.up_proj, w.post_norm);
    w.input_norm = Tensor::full({m.config.hidden}, 1.0f);
    w.post_norm = Tensor::full({m.config.hidden}, 1.0f);
  }
  m.lm_head = fold_gain_rows(m.lm_head, m.final_norm);
  m.final_norm = Tensor::full({m.config.hidden}, 1.0f);
  return m;
}

static ToyModel absorb_r1(const ToyModel& model, const HadamardSpec& r1, bool inverse) {
  if (r1.dim != model.config.hidden) {
    throw Error("R1 dim " + std::to_string(r1.dim) + " must equal hidden " +
                std::to_string(model.config.hidden));
  }
  ToyModel m = model;
  // residual stream x -> x * Q1
  m.embedding = right_mul(m.embedding, r1, inverse);
  for (auto& w : m.layers) {
    w.q_proj = left_mul_qt(w.q_proj, r1, inverse);
    w.k_proj = left_mul_qt(w.k_proj, r1, inverse);
    w.v_proj = left_mul_qt(w.v_proj, r1, inverse);
    w.gate_proj = left_mul_qt(w.gate_proj, r1, inverse);
    w.up_proj = left_mul_qt(w.up_proj, r1, inverse);
    w.o_proj = right_mul(w.o_proj, r1, inverse);
    w.down_proj = right_mul(w.down_proj, r1, inverse);
  }
  m.lm_head = left_mul_qt(m.lm_head, r1, inverse);
  return m;
}

static ToyModel absorb_r2(const ToyModel& model, const HadamardSpec& r2, bool inverse) {
  if (r2.dim != model.config.head_dim) {
    throw Error("R2 dim " + std::to_string(r2.dim) + " must equal head_dim " +
                std::to_string(model.config.head_dim));
  }
  ToyModel m = model;
  // per-head rotation of attention values, undone inside o_proj
  for (auto& w : m.layers) {
    w.v_proj = head_block_right(w.v_proj, r2, m.config.n_heads, inverse);
    w.o_proj = head_block_left_qt(w.o_proj, r2, m.config.n_heads, inverse);
  }
  return m;
}

ToyModel absorb_rotations(const ToyModel& model, const HadamardSpec& r1, const HadamardSpec& r2,
                          bool inverse) {
  ToyModel m = fold_norm_gains(model);
  m = absorb_r1(m, r1, inverse);
  return absorb_r2(m, r2, inverse);
}

ToyModel fuse_r4(const ToyModel& model, const HadamardSpec& r4, bool inverse) {
  if (r4.dim != model.config.intermediate) {
    throw Error("R4 dim " + std::to_string(r4.dim) + " must equal intermediate " +
                std::to_string(model.config.intermediate));
  }
  ToyModel m = model;
  for (auto& w : m.layers) w.down_proj = left_mul_qt(w.down_proj, r4, inverse);
  return m;
}

ToyModel apply_rotations(const ToyModel& model, uint64_t seed, bool r1, bool r2, bool r3,
                         bool r4) {
  if (model.rotation.any()) {
    throw Error("model already carries rotations; rotate the unrotated weights");
  }
  ToyModel m = model;
  if (r1 || r2) m = fold_norm_gains(m);
  if (r1) m = absorb_r1(m, HadamardSpec::make(m.config.hidden, RotationSite::R1, seed), false);
  if (r2) m = absorb_r2(m, HadamardSpec::make(m.config.head_dim, RotationSite::R2, seed), false);
  if (r4) m = fuse_r4(m, HadamardSpec::make(m.config.intermediate, RotationSite::R4, seed), false);
  m.rotation = RotationState{r1, r2, r3, r4, seed};
  return m;
}

}  // namespace pq
