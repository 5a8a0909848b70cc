#pragma once

#include "pq/tensor.hpp"

namespace pq {

enum class Granularity { PerTensor, PerToken, PerChannel, Group, PerHead };
enum class QuantMode { Dynamic, Static };

const char* granularity_name(Granularity g);
Granularity granularity_from_name(const std::string& name);

/// Scheme description: bit width, grouping axis, dynamic/static.
///
/// Grouping conventions over tensor shapes:
///   per_tensor : one group.
///   per_token  : [T x C] or [T x H x D], one group per token row.
///   per_channel: weight [in x out], one group per output column.
///   group      : weight [in x out], chunks of group_size along the input
///                axis within each column; KV [T x H x D], chunks along D
///                within each (token, head).
///   per_head   : [T x H x D], one group per head across all tokens.
struct QuantSpec {
  int bits = 4;
  Granularity gran = Granularity::PerTensor;
  QuantMode mode = QuantMode::Dynamic;
  bool symmetric = false;
  int group_size = 128;

  int qmax() const { return (1 << bits) - 1; }
};

/// Fitted quantizer state: one (s, z) pair per group plus the clipping
/// factors that produced them.
struct QuantParams {
  Tensor scale;  // [n_groups], strictly positive
  Tensor zero;   // [n_groups], integers in [0, 2^N - 1] stored as f32
  float gamma = 1.0f;
  float beta = 1.0f;
};

/// Number of quantization groups the spec induces on `shape`.
/// Throws when the spec cannot apply to the shape (bad rank, group size
/// not dividing the grouped axis).
int64_t quant_group_count(const QuantSpec& spec, const std::vector<int>& shape);

/// Group index of the flat element `idx` under the spec's grouping.
int64_t quant_group_of(const QuantSpec& spec, const std::vector<int>& shape, int64_t idx);

/// Range fit per group: s = (gamma*max - beta*min) / (2^N - 1),
/// z = -floor(beta*min / s) clamped into [0, 2^N - 1]. Degenerate groups
/// (max == min, or s under 1e-8) get the 1e-8 scale guard.
QuantParams fit_params(const Tensor& x, const QuantSpec& spec, float gamma, float beta);

/// Quantize-then-dequantize: s * (clamp(round(x/s) + z, 0, 2^N - 1) - z).
/// Rounding is half-to-even.
Tensor fake_quant(const Tensor& x, const QuantParams& params, const QuantSpec& spec);

/// Mean squared error between a reference output and a quantized output.
double quant_error(const Tensor& x_ref_out, const Tensor& x_q_out);

/// Fits params on the fly with the layer-shared clipping factors, then
/// fake-quantizes. The dynamic path used at activation sites.
Tensor dynamic_quantize_site(const Tensor& x, const QuantSpec& spec, float gamma, float beta);

}  // namespace pq
