#pragma once

#include "pq/calibrate.hpp"
#include "pq/finetune.hpp"
#include "pq/outlier.hpp"
#include "pq/planted.hpp"
#include "pq/prefix.hpp"

namespace pq {

/// Preset quantization schemes:
///   O1: per-channel weights, per-token dynamic activations, group-wise
///       dynamic KV (groups along head_dim, size min(128, head_dim)).
///   O2: per-channel weights, per-tensor static activations, per-head
///       static KV.
///   W4/W3/W2: weight-only, group-wise along the input axis
///       (size min(128, hidden)).
enum class Scheme { O1, O2, W4, W3, W2 };

Scheme scheme_from_name(const std::string& name);
const char* scheme_name(Scheme s);

QuantHookSet make_hooks(Scheme scheme, const ModelConfig& config, int bits_w, int bits_a,
                        int bits_kv);

struct PipelineConfig {
  Scheme scheme = Scheme::O1;
  int bits_w = 4, bits_a = 4, bits_kv = 4;
  bool rotate = true;       // R1-R4, specs derived from `seed`
  bool use_prefix = true;
  bool prefix_reversed = false;  // reverse the outlier-token part of the plan
  uint64_t seed = 0;
  int context_len = 64;     // perplexity window
  OutlierThresholds thresholds;
  CalibConfig calib;
  TrainConfig train;

  uint64_t hash() const;  // embedded in reports for rerunnability
};

struct PipelineResult {
  PipelineConfig config;
  OutlierReport outliers;
  PrefixPlan plan;
  IsolationReport isolation;
  CalibrationReport calibration;
  FinetuneReport finetune;
  // per-block output MSE of the hooked model against its FP32 self
  std::vector<double> block_mse_init;
  std::vector<double> block_mse_calibrated;
  std::vector<double> block_mse_finetuned;
  double ppl_fp32 = 0.0;
  double ppl_quant = 0.0;
  QuantHookSet hooks;  // final fitted quantizer state
};

/// Chains the pipeline stages in order: rotate, analyze, find-prefix, build
/// cache, calibrate, finetune, eval. Mutates `model` (rotation fusion,
/// fine-tuned weights) and returns every stage report.
PipelineResult run_pipeline(ToyModel& model, const std::vector<std::vector<int>>& corpus,
                            const PipelineConfig& cfg);

std::string pipeline_report_json(const PipelineResult& result);

/// Mean block-output MSE per layer of the hooked model against the same
/// model run in full precision, averaged over the sequences.
std::vector<double> block_output_mses(const ToyModel& model, const QuantHookSet& hooks,
                                      const std::vector<std::vector<int>>& sequences,
                                      const PrefixCache* prefix);

/// Per-token error decomposition at one measurement block, with per-token
/// dynamic activation quantization on every linear input. Rows cover
/// {none, rotation, rotation+prefix}; shares split the block-output error
/// between outlier positions (classified on the FP32 run) and the rest.
struct ErrorTable {
  struct Row {
    std::string variant;
    double total_mse = 0.0;
    double outlier_share = 0.0;    // percent
    double remaining_share = 0.0;  // percent
    int outlier_positions = 0;
  };
  int block = 1;
  std::vector<Row> rows;
};

ErrorTable error_decomposition(const ToyModel& model, const std::vector<std::vector<int>>& seqs,
                               const OutlierThresholds& th, int bits, int block_index,
                               uint64_t rotation_seed);

std::string error_table_json(const ErrorTable& table);
std::string error_table_csv(const ErrorTable& table);

}  // namespace pq
