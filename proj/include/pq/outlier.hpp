#pragma once

#include <map>
#include <set>

#include "pq/model.hpp"

namespace pq {

struct OutlierThresholds {
  float eta1 = 64.0f;  // upper outlier when R_i > eta1
  float eta2 = 8.0f;   // lower outlier when 1/R_i > eta2

  void validate() const {
    if (eta1 <= 1.0f || eta2 <= 1.0f) throw Error("outlier thresholds must exceed 1");
  }
};

struct OutlierClassification {
  std::set<int> upper;
  std::set<int> lower;
  Tensor ratios;  // R_i = M_i / median(M)
};

/// Per-site statistics for one layer: token-wise maxima and their ratio
/// summaries, aggregated over calibration sequences.
struct SiteStats {
  std::vector<Tensor> maxima;  // one M vector per calibration sequence
  double max_top1_over_median = 0.0;
  double max_median_over_min1 = 0.0;
};

struct OutlierReport {
  OutlierThresholds thresholds;
  std::vector<SiteStats> block_output;     // per layer
  std::vector<SiteStats> down_proj_input;  // per layer (reported only)
  std::vector<SiteStats> q_site, k_site;   // per layer (lower outliers reported)
  std::vector<double> block_mean_upper_count;  // O, per block
  int outlier_token_count = 0;                 // o = ceil(max(O))
  std::map<int, int> token_frequency;          // upper-outlier token id -> count,
                                               // position 0 excluded
};

/// M_i = max over channels of |x_{i,.}| for x [T x C] (or [T x H x D]).
Tensor token_maxima(const Tensor& x);

/// Eq-style ratio classification with lower-median; median guarded at 1e-12.
OutlierClassification classify_outliers(const Tensor& maxima, const OutlierThresholds& th);

/// FP32 detection pass over calibration sequences. Counts upper outliers at
/// block outputs (the counting site), reports down_proj inputs and Q/K, and
/// tallies token ids at upper-outlier positions excluding position 0.
OutlierReport analyze_outliers(const ToyModel& model,
                               const std::vector<std::vector<int>>& calib_sequences,
                               const OutlierThresholds& th);

}  // namespace pq
