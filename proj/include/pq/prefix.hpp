#pragma once

#include "pq/outlier.hpp"

namespace pq {

/// Ordered list of prefixed token ids, BOS stored last. `o` counts BOS.
struct PrefixPlan {
  std::vector<int> token_ids;
  int o = 0;

  void validate() const;
};

/// Full-precision per-layer k'/v' for the prefixed tokens (post-RoPE, and
/// post-R3 when rotation is active). Built once from an unhooked FP32
/// forward and reused by every quantized run.
struct PrefixCache {
  PrefixPlan plan;
  std::vector<Tensor> keys;    // per layer [o x H x D]
  std::vector<Tensor> values;  // per layer [o x H x D]
  uint64_t fingerprint = 0;

  int length() const { return plan.o; }
};

/// Top (o-1) most frequent non-initial outlier tokens (ties to the smaller
/// id), BOS appended last. Empty tally or o == 1 collapses to [BOS].
PrefixPlan select_prefix(const OutlierReport& report, int o, int bos = kBosToken);

PrefixCache build_prefix_cache(const ToyModel& model, const PrefixPlan& plan);

/// Eq.-(4) attention: Q over [prefix || K] with causal masking among the
/// real positions only; the prefix is visible to every query. Q is
/// [T x H x D]; K/V are [S x H x D] with S >= T (the last T rows are the
/// current tokens); k'/v' are [o x H x D] or empty for o = 0.
Tensor attention_with_prefix(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& k_prime, const Tensor& v_prime);

struct IsolationReport {
  int residual_upper_count = 0;        // upper outliers at non-prefix positions
  double max_ratio_without = 0.0;      // max top-1/median, no prefix
  double max_ratio_with = 0.0;         // max top-1/median, prefix active
};

/// Re-runs FP32 outlier detection with the prefix active and reports how
/// many upper outliers remain at non-prefix positions.
IsolationReport verify_isolation(const ToyModel& model, const PrefixPlan& plan,
                                 const std::vector<std::vector<int>>& calib_sequences,
                                 const OutlierThresholds& th);

// Prefix cache file: same container discipline as the model format
// ("PQPC" magic, JSON header, little-endian f32 payload).
void save_prefix_cache(const PrefixCache& cache, const std::string& path);
PrefixCache load_prefix_cache(const std::string& path);

}  // namespace pq
