#include "pq/outlier.hpp"

#include <cmath>

namespace pq {

Tensor token_maxima(const Tensor& x) {
  if (x.ndim() < 2) throw Error("token_maxima expects at least 2-d input");
  const int t = x.dim(0);
  const int64_t row = x.size() / t;
  Tensor m({t});
  for (int i = 0; i < t; ++i) {
    float mx = 0.0f;
    const float* p = x.data() + static_cast<int64_t>(i) * row;
    for (int64_t j = 0; j < row; ++j) mx = std::max(mx, std::abs(p[j]));
    m[i] = mx;
  }
  return m;
}

OutlierClassification classify_outliers(const Tensor& maxima, const OutlierThresholds& th) {
  th.validate();
  if (maxima.ndim() != 1 || maxima.dim(0) < 2) {
    throw Error("classify_outliers needs a maxima vector of length >= 2");
  }
  const float med = std::max(median(maxima.vec()), 1e-12f);
  OutlierClassification out;
  out.ratios = Tensor({maxima.dim(0)});
  for (int i = 0; i < maxima.dim(0); ++i) {
    const float r = maxima[i] / med;
    out.ratios[i] = r;
    if (r > th.eta1) out.upper.insert(i);
    if (r > 0.0f && 1.0f / r > th.eta2) out.lower.insert(i);
    if (r == 0.0f) out.lower.insert(i);  // zero-maximum token is maximally small
  }
  return out;
}

namespace {

void accumulate_site(SiteStats& stats, const Tensor& activation, const OutlierThresholds& th) {
  Tensor m = token_maxima(activation);
  if (m.dim(0) >= 2) {
    const OutlierClassification c = classify_outliers(m, th);
    float top1 = 0.0f, min1 = c.ratios[0];
    for (int i = 0; i < c.ratios.dim(0); ++i) {
      top1 = std::max(top1, c.ratios[i]);
      min1 = std::min(min1, c.ratios[i]);
    }
    stats.max_top1_over_median = std::max<double>(stats.max_top1_over_median, top1);
    if (min1 > 0.0f) {
      stats.max_median_over_min1 = std::max<double>(stats.max_median_over_min1, 1.0 / min1);
    }
  }
  stats.maxima.push_back(std::move(m));
}

}  // namespace

OutlierReport analyze_outliers(const ToyModel& model,
                               const std::vector<std::vector<int>>& calib_sequences,
                               const OutlierThresholds& th) {
  th.validate();
  if (calib_sequences.empty()) throw Error("outlier analysis needs at least one calibration sequence");
  const int nl = model.config.n_layers;
  OutlierReport report;
  report.thresholds = th;
  report.block_output.resize(static_cast<size_t>(nl));
  report.down_proj_input.resize(static_cast<size_t>(nl));
  report.q_site.resize(static_cast<size_t>(nl));
  report.k_site.resize(static_cast<size_t>(nl));
  std::vector<double> upper_sum(static_cast<size_t>(nl), 0.0);

  for (const auto& seq : calib_sequences) {
    ActivationCapture cap;
    cap.want_block_output = true;
    cap.want_down_proj_input = true;
    cap.want_qk = true;
    ForwardOptions opts;
    opts.capture = &cap;  // FP32: no hooks, no prefix
    forward(model, seq, opts);
    for (int l = 0; l < nl; ++l) {
      accumulate_site(report.block_output[static_cast<size_t>(l)],
                      cap.block_output[static_cast<size_t>(l)], th);
      accumulate_site(report.down_proj_input[static_cast<size_t>(l)],
                      cap.down_proj_input[static_cast<size_t>(l)], th);
      accumulate_site(report.q_site[static_cast<size_t>(l)], cap.q[static_cast<size_t>(l)], th);
      accumulate_site(report.k_site[static_cast<size_t>(l)], cap.k[static_cast<size_t>(l)], th);

      const Tensor& m = report.block_output[static_cast<size_t>(l)].maxima.back();
      if (m.dim(0) >= 2) {
        const OutlierClassification c = classify_outliers(m, th);
        upper_sum[static_cast<size_t>(l)] += static_cast<double>(c.upper.size());
        for (int idx : c.upper) {
          if (idx == 0) continue;  // frequencies exclude the initial token
          report.token_frequency[seq[static_cast<size_t>(idx)]] += 1;
        }
      }
    }
  }

  double max_o = 0.0;
  report.block_mean_upper_count.resize(static_cast<size_t>(nl));
  for (int l = 0; l < nl; ++l) {
    const double o = upper_sum[static_cast<size_t>(l)] / static_cast<double>(calib_sequences.size());
    report.block_mean_upper_count[static_cast<size_t>(l)] = o;
    max_o = std::max(max_o, o);
  }
  report.outlier_token_count = static_cast<int>(std::ceil(max_o));
  return report;
}

}  // namespace pq
