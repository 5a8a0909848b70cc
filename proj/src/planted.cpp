#include "pq/planted.hpp"

#include <algorithm>
#include <cmath>

namespace pq {

namespace {

void zero_column(Tensor& w, int col) {
  for (int i = 0; i < w.dim(0); ++i) w(i, col) = 0.0f;
}

void zero_row(Tensor& w, int row) {
  for (int j = 0; j < w.dim(1); ++j) w(row, j) = 0.0f;
}

// Lowest RoPE pair whose full swing over `range` positions stays below
// `max_angle` radians. With max_angle <= pi the sine kernel keeps one sign
// for every positive distance; with max_angle ~1 the cosine kernel stays
// close to 1 over the whole range.
int pick_rope_pair(const ModelConfig& c, int range, double max_angle) {
  for (int p = 0; p < c.head_dim / 2; ++p) {
    const double freq = std::pow(static_cast<double>(c.rope_theta),
                                 -2.0 * p / static_cast<double>(c.head_dim));
    if (freq * range <= max_angle) return p;
  }
  throw Error("no RoPE pair is slow enough for range " + std::to_string(range) +
              " at head_dim " + std::to_string(c.head_dim));
}

}  // namespace

ToyModel plant_outlier_trigger(const ToyModel& base, const PlantedConfig& cfg) {
  const ModelConfig& c = base.config;
  const int n_classes = static_cast<int>(cfg.trigger_tokens.size());
  if (n_classes < 1) throw Error("planting needs at least one trigger token");
  if (cfg.layer < 0 || cfg.layer >= c.n_layers) {
    throw Error("trigger layer " + std::to_string(cfg.layer) + " out of range");
  }
  if (n_classes > c.n_heads) throw Error("more trigger classes than attention heads");
  if (n_classes >= c.intermediate) throw Error("more trigger classes than MLP neurons");
  if (c.hidden < 4 * n_classes + 4) throw Error("hidden too small for reserved channels");
  for (int t : cfg.trigger_tokens) {
    if (t < 0 || t >= 256) throw Error("trigger token must be a byte, got " + std::to_string(t));
    if (std::count(cfg.trigger_tokens.begin(), cfg.trigger_tokens.end(), t) != 1) {
      throw Error("duplicate trigger token " + std::to_string(t));
    }
  }
  if (cfg.anchor_token < 0 || cfg.anchor_token >= 256 ||
      std::count(cfg.trigger_tokens.begin(), cfg.trigger_tokens.end(), cfg.anchor_token) != 0) {
    throw Error("anchor token must be a non-trigger byte");
  }
  if (base.rotation.any()) throw Error("plant before applying rotations");

  ToyModel m = base;
  const int ch_fire = c.hidden - 1;
  auto ch_member = [&](int cls) { return c.hidden - 2 - cls; };
  auto ch_inhibit = [&](int cls) { return c.hidden - 2 - n_classes - cls; };
  const int ch_one = c.hidden - 2 - 2 * n_classes;
  const int ch_anchor = ch_one - 1;
  const int range = std::min(cfg.max_range, c.max_seq) - 1;
  const int sine_pair = pick_rope_pair(c, range, 3.0);
  int cos_pair = pick_rope_pair(c, range, 1.0);
  if (cos_pair == sine_pair) ++cos_pair;
  if (2 * cos_pair + 1 >= c.head_dim) throw Error("head_dim too small for two designed pairs");

  std::vector<int> reserved = {ch_fire, ch_one, ch_anchor};
  for (int cls = 0; cls < n_classes; ++cls) {
    reserved.push_back(ch_member(cls));
    reserved.push_back(ch_inhibit(cls));
  }

  // Reserved channels are written only where designed: wipe the embedding
  // columns and every block's residual writes into them first.
  for (int ch : reserved) {
    zero_column(m.embedding, ch);
    for (auto& w : m.layers) {
      zero_column(w.o_proj, ch);
      zero_column(w.down_proj, ch);
    }
  }

  // Membership indicators. BOS joins every class so a prefix ending in BOS
  // suppresses all trigger classes regardless of which tokens precede it.
  for (int cls = 0; cls < n_classes; ++cls) {
    m.embedding(cfg.trigger_tokens[static_cast<size_t>(cls)], ch_member(cls)) = 1.0f;
    m.embedding(kBosToken, ch_member(cls)) = 1.0f;
  }
  // Constant channel (query side of the anchor kernel) and anchor marker.
  for (int v = 0; v < c.vocab; ++v) m.embedding(v, ch_one) = 1.0f;
  m.embedding(cfg.anchor_token, ch_anchor) = 1.0f;

  LayerWeights& w = m.layers[static_cast<size_t>(cfg.layer)];
  for (int cls = 0; cls < n_classes; ++cls) {
    const int off = cls * c.head_dim;
    const int qa = off + 2 * sine_pair, qb = qa + 1;
    const int aa = off + 2 * cos_pair;
    // Index 0 of a head or of the MLP maps to the all-ones Walsh-Hadamard
    // row, which rotates a lone spike into a strictly positive constant row
    // that the clamped-zero-point quantizer cannot represent. Planted value
    // dims and neurons therefore start at index 1.
    const int vdim = off + 1;
    const int neuron = cls + 1;

    // Head `cls` is fully designed: every column is wiped so its scores come
    // only from the two kernels below and are stable under quantization
    // noise elsewhere.
    //   Member kernel: query raw (0, -k) and key raw (k, 0) on the slow pair
    //   give a post-RoPE score proportional to sin((i - j) * w): exactly
    //   zero on self, positive for any earlier member.
    //   Anchor kernel: query on the constant channel and key on the anchor
    //   marker, both raw (g, 0), score proportional to cos((i - j) * w'):
    //   large for every row, so attention parks on the position-0 anchor
    //   whenever no earlier member outbids it.
    // The value mark carries membership onto the inhibition channel through
    // o_proj; the anchor itself carries no mark.
    for (int dim = off; dim < off + c.head_dim; ++dim) {
      zero_column(w.q_proj, dim);
      zero_column(w.k_proj, dim);
      zero_column(w.v_proj, dim);
      zero_row(w.o_proj, dim);
    }
    w.q_proj(ch_member(cls), qb) = -cfg.key_gain;
    w.k_proj(ch_member(cls), qa) = cfg.key_gain;
    w.q_proj(ch_one, aa) = cfg.anchor_gain;
    w.k_proj(ch_anchor, aa) = cfg.anchor_gain;
    w.v_proj(ch_member(cls), vdim) = cfg.value_gain;
    w.o_proj(vdim, ch_inhibit(cls)) = 1.0f;

    // Neuron `cls`: fires amplitude * silu(on * member - off * inhibit) * up
    // into the fire channel. With a dominant inhibition weight the gate
    // saturates negative whenever an earlier member absorbed the attention
    // mass, so only the first visible member fires.
    zero_column(w.gate_proj, neuron);
    zero_column(w.up_proj, neuron);
    zero_row(w.down_proj, neuron);
    w.gate_proj(ch_member(cls), neuron) = cfg.gate_on;
    w.gate_proj(ch_inhibit(cls), neuron) = cfg.gate_off;
    w.up_proj(ch_member(cls), neuron) = cfg.up_gain;
    w.down_proj(neuron, ch_fire) = cfg.amplitude;
  }

  m.validate();
  return m;
}

std::vector<std::vector<int>> make_trigger_corpus(Rng& rng, int n_sequences, int seq_len,
                                                  const std::vector<int>& trigger_tokens,
                                                  int anchor_token) {
  if (n_sequences < 1 || seq_len < 8) throw Error("corpus needs >= 1 sequences of length >= 8");
  auto excluded = [&](int t) {
    return t == anchor_token ||
           std::find(trigger_tokens.begin(), trigger_tokens.end(), t) != trigger_tokens.end();
  };
  std::vector<std::vector<int>> corpus;
  corpus.reserve(static_cast<size_t>(n_sequences));
  for (int s = 0; s < n_sequences; ++s) {
    std::vector<int> seq(static_cast<size_t>(seq_len));
    seq[0] = anchor_token;
    for (int i = 1; i < seq_len; ++i) {
      int t;
      do {
        t = 32 + rng.next_int(95);  // printable bytes
      } while (excluded(t));
      seq[static_cast<size_t>(i)] = t;
    }
    // Positions 0..3 stay trigger-free so a prefixed member is always a few
    // positions back, where the sine kernel already has a solid margin.
    std::vector<int> used;
    for (size_t k = 0; k < trigger_tokens.size(); ++k) {
      if (k > 0 && rng.uniform() >= 0.8) continue;
      int pos;
      do {
        pos = 4 + rng.next_int(seq_len - 4);
      } while (std::find(used.begin(), used.end(), pos) != used.end());
      used.push_back(pos);
      seq[static_cast<size_t>(pos)] = trigger_tokens[k];
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace pq
