#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pq/quant.hpp"
#include "pq/tensor.hpp"

namespace pq {

struct PrefixCache;  // defined in pq/prefix.hpp

constexpr int kBosToken = 256;  // byte-level vocab 0..255 plus BOS

struct ModelConfig {
  int n_layers = 4;
  int hidden = 256;
  int n_heads = 4;
  int head_dim = 64;
  int intermediate = 512;
  int vocab = 257;
  int max_seq = 512;
  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Which Hadamard rotations are active and the seed their sign diagonals
/// derive from. Persisted in the container header so a loaded model keeps
/// applying the right online rotations.
struct RotationState {
  bool r1 = false, r2 = false, r3 = false, r4 = false;
  uint64_t seed = 0;
  bool any() const { return r1 || r2 || r3 || r4; }
  bool operator==(const RotationState&) const = default;
};

/// Weight layout: every projection is stored [in_features x out_features]
/// so activations multiply on the left (y = x * W).
struct LayerWeights {
  Tensor q_proj, k_proj, v_proj, o_proj;
  Tensor gate_proj, up_proj, down_proj;
  Tensor input_norm, post_norm;
};

struct ToyModel {
  ModelConfig config;
  std::vector<LayerWeights> layers;
  Tensor embedding;   // [vocab x hidden]
  Tensor final_norm;  // [hidden]
  Tensor lm_head;     // [hidden x vocab]
  RotationState rotation;

  void validate() const;
  /// Hash over config and all weight bytes; ties caches to their model.
  uint64_t fingerprint() const;
};

/// Per-layer KV state for incremental decoding, [t x n_heads x head_dim].
struct KvCache {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  int length = 0;
};

/// Quantization hook configuration. Site names:
///   weight:<linear>  input:<linear>   for linear in
///   {q_proj,k_proj,v_proj,o_proj,gate_proj,up_proj,down_proj}
///   Q, K, V          activation sites (Q/K post-RoPE, KV cache entries)
/// Per-layer fitted parameters (clipping factors, static s/z) live in
/// `layer_params`; a missing entry means gamma = beta = 1 with on-the-fly
/// range fitting.
struct QuantHookSet {
  std::map<std::string, QuantSpec> sites;
  std::vector<std::map<std::string, QuantParams>> layer_params;

  static const std::vector<std::string>& known_sites();
  bool empty() const { return sites.empty(); }
  void validate() const;
  const QuantParams* find_params(int layer, const std::string& site) const;
  void set_params(int layer, const std::string& site, QuantParams p);
};

/// Requested activation captures; filled per layer during forward.
struct ActivationCapture {
  bool want_block_input = false;
  bool want_block_output = false;
  bool want_down_proj_input = false;
  bool want_qk = false;
  bool want_linear_inputs = false;

  std::vector<Tensor> block_input;       // [n_layers][T x hidden]
  std::vector<Tensor> block_output;      // [n_layers][T x hidden]
  std::vector<Tensor> down_proj_input;   // [n_layers][T x intermediate]
  std::vector<Tensor> q, k, v;           // [n_layers][T x H x D], pre-quant
  std::vector<std::map<std::string, Tensor>> linear_inputs;  // pre-quant
};

struct ForwardOptions {
  const QuantHookSet* hooks = nullptr;
  KvCache* cache = nullptr;
  const PrefixCache* prefix = nullptr;
  ActivationCapture* capture = nullptr;
};

ToyModel init_random_model(const ModelConfig& config, Rng& rng);

/// RoPE applied head-wise over [T x H x D], row 0 at absolute position pos0.
Tensor rope_heads(const Tensor& x, int pos0, float theta);

/// Causal forward over (prefix || cache || tokens). Returns logits
/// [T x vocab]; appends the new tokens' K/V to `cache` when given.
Tensor forward(const ToyModel& model, const std::vector<int>& tokens,
               const ForwardOptions& opts = {});

/// One transformer block over x [T x hidden]. `pos0` is the absolute RoPE
/// position of row 0; `layer_kv` optionally receives/provides cache state
/// for this layer. Exposed for block-wise calibration and fine-tuning.
struct BlockKv {
  const Tensor* prefix_k = nullptr;  // [o x H x D]
  const Tensor* prefix_v = nullptr;
  const Tensor* past_k = nullptr;  // cached earlier positions, [t x H x D]
  const Tensor* past_v = nullptr;
  Tensor* new_k = nullptr;  // receive this call's (quantized) K/V when set
  Tensor* new_v = nullptr;
};
Tensor block_forward(const ToyModel& model, int layer, const Tensor& x, int pos0,
                     const QuantHookSet* hooks, const BlockKv* kv,
                     ActivationCapture* capture);

double perplexity(const ToyModel& model, const std::vector<int>& corpus,
                  const QuantHookSet* hooks, const PrefixCache* prefix, int context_len);

std::vector<int> tokenize(const std::string& bytes);
std::string detokenize(const std::vector<int>& tokens);

// Container I/O: "PQTM" magic, u32 version, u64 JSON header length,
// UTF-8 JSON header, then raw little-endian f32 payload.
void save_model(const ToyModel& model, const std::string& path,
                const QuantHookSet* hooks = nullptr);
ToyModel load_model(const std::string& path, QuantHookSet* hooks_out = nullptr);

}  // namespace pq
