#pragma once

#include "pq/prefix.hpp"

namespace pq {

/// Grid-search settings. Dynamic sites search clipping factors over
/// [grid_lo, grid_hi] in grid_step increments (gamma only for weights and
/// symmetric specs, joint gamma x beta otherwise). Static sites search a
/// geometric scale grid of static_scale_points spanning
/// [s_range / static_scale_span, s_range] crossed with every integer zero
/// point, where s_range is the unclipped range fit.
struct CalibConfig {
  float grid_lo = 0.50f;
  float grid_hi = 1.00f;
  float grid_step = 0.01f;
  int static_scale_points = 100;
  float static_scale_span = 50.0f;

  void validate() const;
};

struct SiteCalibration {
  int layer = 0;
  std::string site;
  bool is_static = false;
  float gamma = 1.0f, beta = 1.0f;  // chosen clipping (dynamic sites)
  double err_before = 0.0;          // objective at the unclipped range fit
  double err_after = 0.0;           // objective at the chosen parameters
};

struct CalibrationReport {
  CalibConfig config;
  std::vector<SiteCalibration> sites;
  double total_err_before = 0.0;
  double total_err_after = 0.0;
};

/// Fits clipping factors / static (s, z) for every hooked site, writing the
/// results into `hooks.layer_params`. Layers are processed in order and each
/// layer's inputs come from the already-quantized earlier layers, so
/// quantization error propagates the way it will at inference time.
///
/// Objectives, summed over calibration sequences:
///   weight:* sites  minimize the linear-output error || x W - x q(W) ||^2
///   activation sites (input:*, Q, K, V) minimize the site reconstruction
///   error || x - q(x) ||^2.
/// Ties prefer the larger clipping factor / scale, so an all-tie sweep
/// degenerates to the plain range fit.
CalibrationReport calibrate_hooks(const ToyModel& model, QuantHookSet& hooks,
                                  const std::vector<std::vector<int>>& sequences,
                                  const PrefixCache* prefix, const CalibConfig& cfg = {});

std::string calibration_report_json(const CalibrationReport& report);

/// Worker count used for grid sweeps: hardware concurrency capped by the
/// PREFIXQUANT_THREADS environment variable (a cap of 0 or 1 disables
/// threading). Results are reduced in candidate order either way.
int thread_limit();

}  // namespace pq
