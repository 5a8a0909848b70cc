#pragma once

#include "pq/autodiff.hpp"
#include "pq/model.hpp"
#include "pq/prefix.hpp"

namespace pq {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 4;
  float lr_qparams = 5e-5f;
  float lr_weights = 5e-6f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float divergence_factor = 10.0f;  // abort a block when loss exceeds this
                                    // multiple of its starting loss
  bool train_weights = true;
  bool train_qparams = true;
  uint64_t seed = 0;  // batch shuffling

  void validate() const;
};

/// Trainable leaves for one block: the full-precision weights plus the
/// quantizer parameters of every hooked site. Dynamic sites train their
/// clipping pair, fitted static sites train (scale, zero) directly; the
/// zero point stays continuous during training and is rounded on write-back.
struct BlockVars {
  Var q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj;
  Var input_norm, post_norm;
  std::map<std::string, std::pair<Var, Var>> site_params;  // (gamma,beta) or (scale,zero)
  std::map<std::string, bool> site_static;                 // true when (scale,zero)
};

BlockVars make_block_vars(Tape& tape, const ToyModel& model, int layer,
                          const QuantHookSet& hooks, bool train_weights, bool train_qparams);

/// Tape mirror of block_forward: identical op order and primitives, so the
/// forward value is bit-exact with the inference path (for integral zero
/// points). The KV cache path is not supported; training sees whole
/// sequences plus an optional constant prefix.
Var block_forward_tape(Tape& tape, const ToyModel& model, int layer, const BlockVars& vars,
                       Var x, int pos0, const QuantHookSet& hooks, const PrefixCache* prefix);

struct BlockTrainResult {
  int layer = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::vector<double> loss_curve;  // mean training loss per epoch
  bool diverged = false;           // parameters were rolled back
};

struct FinetuneReport {
  TrainConfig config;
  std::vector<BlockTrainResult> blocks;
};

/// Block-wise distillation: for each block in order, the quantized block on
/// quantized-pipeline inputs is trained to match the frozen full-precision
/// block on full-precision inputs. Updates model weights and
/// hooks.layer_params in place.
FinetuneReport finetune_blocks(ToyModel& model, QuantHookSet& hooks,
                               const std::vector<std::vector<int>>& sequences,
                               const PrefixCache* prefix, const TrainConfig& cfg = {});

std::string finetune_report_json(const FinetuneReport& report);

}  // namespace pq
