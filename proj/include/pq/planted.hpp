#pragma once

#include "pq/model.hpp"

namespace pq {

/// Synthetic outlier-token generator. A random toy model is post-edited so
/// that, for each trigger class, the first visible occurrence of a class
/// member (after position 0) produces a massive activation at the block
/// output, while any earlier visible member, including one sitting in a
/// KV prefix, suppresses the firing.
///
/// Mechanism, all inside `layer`:
///   - one reserved embedding channel per class marks membership; BOS is a
///     member of every class so a prefix ending in BOS suppresses them all,
///   - one attention head per class scores earlier members with a
///     low-frequency sine RoPE pair (zero on self, positive for any earlier
///     member) and carries membership through its value path onto a
///     reserved inhibition channel,
///   - every designed head also scores a dedicated anchor token, placed at
///     position 0 of each corpus sequence, with a slow cosine pair. The
///     anchor outranks score noise and self-attention, so when no earlier
///     member is visible the head parks its mass on the anchor (whose value
///     mark is zero) instead of spreading it across arbitrary tokens,
///   - one MLP neuron per class fires a large value into a reserved output
///     channel when membership is present and inhibition is absent.
struct PlantedConfig {
  int layer = 1;
  std::vector<int> trigger_tokens = {'.', '\n'};
  int anchor_token = 1;      // byte placed at position 0 of every sequence
  int max_range = 128;       // positions the designed kernels stay monotone over
  float amplitude = 30.0f;   // down_proj gain into the fire channel
  float key_gain = 6.0f;     // query/key magnitude on the sine pair
  float anchor_gain = 1.35f; // query/key magnitude on the anchor cosine pair
  float gate_on = 2.0f;      // membership weight in the gate neuron
  float gate_off = -1.5f;    // inhibition weight in the gate neuron
  float value_gain = 0.35f;  // attention value magnitude carrying inhibition
  float up_gain = 0.09f;
};

ToyModel plant_outlier_trigger(const ToyModel& base, const PlantedConfig& cfg = {});

/// Seeded byte corpus for detection/calibration runs. Sequences start with
/// the anchor token, continue with random printable bytes, and get the
/// first trigger injected once per sequence (at a random position >= 4)
/// and each further trigger injected with probability 0.8, so trigger
/// frequencies are strictly ordered.
std::vector<std::vector<int>> make_trigger_corpus(Rng& rng, int n_sequences, int seq_len,
                                                  const std::vector<int>& trigger_tokens,
                                                  int anchor_token = 1);

}  // namespace pq
