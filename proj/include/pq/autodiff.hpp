#pragma once

#include <functional>
#include <memory>

#include "pq/quant.hpp"
#include "pq/rotation.hpp"

namespace pq {

/// Reverse-mode tape. Ops record their forward value and a backward closure;
/// Tape::backward walks the recording in reverse. Forward values are
/// computed with the same primitives the inference path uses, so an
/// untrained tape reproduces block_forward bit for bit.
struct TapeNode {
  Tensor val;
  Tensor grad;  // allocated on first use, same shape as val
  bool requires_grad = false;
  std::function<void(TapeNode&)> back;

  Tensor& grad_buf() {
    if (grad.empty()) grad = Tensor(val.shape());
    return grad;
  }
};

using Var = std::shared_ptr<TapeNode>;

class Tape {
 public:
  /// Wraps a value; `requires_grad` marks trainable leaves.
  Var leaf(Tensor value, bool requires_grad = false);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, float c);
  Var silu(Var x);
  Var rmsnorm(Var x, Var gain, float eps);
  Var reshape(Var x, std::vector<int> shape);
  /// Head-wise RoPE on [T x H x D], row 0 at absolute position pos0.
  Var rope_heads(Var x, int pos0, float theta);
  Var online_rotate(Var x, HadamardSpec spec);

  /// Softmax attention over (prefix || keys) with the same visibility rule
  /// as attention_with_prefix; the prefix tensors are constants.
  Var attention(Var q, Var k, Var v, Tensor prefix_k, Tensor prefix_v);

  /// Dynamic fake quantization with trainable clipping factors ([1] leaves).
  /// x flows through a pass-through (straight-through) gradient on in-range
  /// elements; gamma/beta get range-fit gradients with the zero point held
  /// locally constant.
  Var fake_quant_dynamic(Var x, Var gamma, Var beta, QuantSpec spec);

  /// Static fake quantization with trainable per-group scale and zero
  /// ([n_groups] leaves). The zero point is treated as continuous during
  /// training and only contributes gradient on clamped elements.
  Var fake_quant_static(Var x, Var scale, Var zero, QuantSpec spec);

  /// Mean squared error against a constant target; value has shape [1].
  Var mse_loss(Var x, Tensor target);

  /// Seeds `root` (which must be scalar) with gradient 1 and propagates
  /// back through everything recorded since construction.
  void backward(const Var& root);

  size_t size() const { return nodes_.size(); }

 private:
  Var record(Tensor val, std::function<void(TapeNode&)> back);
  std::vector<Var> nodes_;
};

}  // namespace pq
