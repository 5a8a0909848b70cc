#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "pq/finetune.hpp"
#include "pq/harness.hpp"

using namespace pq;

namespace {

// Central finite-difference gradient check for one leaf of a scalar-valued
// tape program. `build` must record the loss from scratch each call.
// eps balances the f32 forward's rounding noise against truncation error;
// 1e-2 keeps both comfortably under the 1e-3 relative tolerance.
void check_gradient(const std::function<double(const Tensor&)>& value_of, const Tensor& at,
                    const Tensor& analytic, double eps = 1e-2, double tol = 1e-3) {
  for (int64_t i = 0; i < at.size(); ++i) {
    Tensor lo = at, hi = at;
    lo[i] -= static_cast<float>(eps);
    hi[i] += static_cast<float>(eps);
    const double fd = (value_of(hi) - value_of(lo)) / (2.0 * eps);
    const double an = analytic[i];
    // gradients below ~1e-2 sit under the f32 finite-difference resolution,
    // so they fall back to an absolute tolerance of tol * 1e-2
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
    CHECK(std::abs(fd - an) / denom < tol);
  }
}

// Evaluated in double so the finite difference is not limited by the f32
// rounding of the scalar loss node.
double run_loss(const std::function<Var(Tape&, Var)>& graph, const Tensor& x,
                const Tensor& target) {
  Tape tape;
  Var leaf = tape.leaf(x, true);
  Var out = graph(tape, leaf);
  double acc = 0.0;
  for (int64_t i = 0; i < out->val.size(); ++i) {
    const double d = static_cast<double>(out->val[i]) - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(out->val.size());
}

Tensor run_grad(const std::function<Var(Tape&, Var)>& graph, const Tensor& x,
                const Tensor& target) {
  Tape tape;
  Var leaf = tape.leaf(x, true);
  Var out = graph(tape, leaf);
  Var loss = tape.mse_loss(out, target);
  tape.backward(loss);
  return leaf->grad;
}

void check_unary(const std::function<Var(Tape&, Var)>& graph, const Tensor& x,
                 const Tensor& target, double tol = 1e-3) {
  Tensor g = run_grad(graph, x, target);
  check_gradient([&](const Tensor& at) { return run_loss(graph, at, target); }, x, g, 1e-2, tol);
}

}  // namespace

TEST_CASE("elementwise and matmul gradients match finite differences") {
  Rng rng(1);
  Tensor x = rng.normal_tensor({2, 4}, 0.0, 1.0);
  Tensor target = rng.normal_tensor({2, 3}, 0.0, 1.0);
  Tensor w = rng.normal_tensor({4, 3}, 0.0, 1.0);

  SUBCASE("matmul wrt left operand") {
    check_unary([&](Tape& t, Var v) { return t.matmul(v, t.leaf(w)); }, x, target);
  }
  SUBCASE("matmul wrt right operand") {
    Tensor tgt = rng.normal_tensor({4, 3}, 0.0, 1.0);
    check_unary([&](Tape& t, Var v) { return t.matmul(t.leaf(x.reshape({4, 2})), v); },
                rng.normal_tensor({2, 3}, 0.0, 1.0), tgt);
  }
  SUBCASE("add, mul, scale") {
    Tensor other = rng.normal_tensor({2, 4}, 0.0, 1.0);
    Tensor tgt = rng.normal_tensor({2, 4}, 0.0, 1.0);
    check_unary([&](Tape& t, Var v) { return t.add(v, t.leaf(other)); }, x, tgt);
    check_unary([&](Tape& t, Var v) { return t.mul(v, t.leaf(other)); }, x, tgt);
    check_unary([&](Tape& t, Var v) { return t.scale(v, -1.7f); }, x, tgt);
  }
  SUBCASE("silu") {
    Tensor tgt = rng.normal_tensor({2, 4}, 0.0, 1.0);
    check_unary([&](Tape& t, Var v) { return t.silu(v); }, x, tgt);
  }
}

TEST_CASE("rmsnorm gradients match finite differences, for x and the gain") {
  Rng rng(2);
  Tensor x = rng.normal_tensor({3, 4}, 0.0, 1.0);
  Tensor gain = rng.normal_tensor({4}, 1.0, 0.1);
  Tensor tgt = rng.normal_tensor({3, 4}, 0.0, 1.0);
  check_unary([&](Tape& t, Var v) { return t.rmsnorm(v, t.leaf(gain), 1e-5f); }, x, tgt);
  // gain gradient
  auto graph = [&](Tape& t, Var g) { return t.rmsnorm(t.leaf(x), g, 1e-5f); };
  check_unary(graph, gain, tgt);
}

TEST_CASE("rope and rotation gradients match finite differences") {
  Rng rng(3);
  Tensor x = rng.normal_tensor({2, 2, 4}, 0.0, 1.0);
  Tensor tgt = rng.normal_tensor({2, 2, 4}, 0.0, 1.0);
  check_unary([&](Tape& t, Var v) { return t.rope_heads(v, 3, 10000.0f); }, x, tgt);
  HadamardSpec spec = HadamardSpec::make(4, RotationSite::R3, 5);
  check_unary([&](Tape& t, Var v) { return t.online_rotate(v, spec); }, x, tgt);
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(4);
  Tensor q = rng.normal_tensor({3, 2, 4}, 0.0, 0.7);
  Tensor k = rng.normal_tensor({3, 2, 4}, 0.0, 0.7);
  Tensor v = rng.normal_tensor({3, 2, 4}, 0.0, 0.7);
  Tensor kp = rng.normal_tensor({1, 2, 4}, 0.0, 0.7);
  Tensor vp = rng.normal_tensor({1, 2, 4}, 0.0, 0.7);
  Tensor tgt = rng.normal_tensor({3, 2, 4}, 0.0, 1.0);

  auto wrt_q = [&](Tape& t, Var var) { return t.attention(var, t.leaf(k), t.leaf(v), kp, vp); };
  auto wrt_k = [&](Tape& t, Var var) { return t.attention(t.leaf(q), var, t.leaf(v), kp, vp); };
  auto wrt_v = [&](Tape& t, Var var) { return t.attention(t.leaf(q), t.leaf(k), var, kp, vp); };
  check_unary(wrt_q, q, tgt);
  check_unary(wrt_k, k, tgt);
  check_unary(wrt_v, v, tgt);
}

TEST_CASE("dynamic fake-quant follows the declared straight-through rule") {
  Rng rng(5);
  QuantSpec spec{4, Granularity::PerToken, QuantMode::Dynamic, false, 0};
  Tensor x = rng.normal_tensor({2, 6}, 0.0, 1.5);
  Tensor tgt = rng.normal_tensor({2, 6}, 0.0, 1.0);
  const float g0 = 0.83f, b0 = 0.77f;

  // x gradient: pass-through inside the clamp range, zero outside.
  Tape tape;
  Var vx = tape.leaf(x, true);
  Var vg = tape.leaf(Tensor({1}, {g0}), true);
  Var vb = tape.leaf(Tensor({1}, {b0}), true);
  Var out = tape.fake_quant_dynamic(vx, vg, vb, spec);
  Var loss = tape.mse_loss(out, tgt);
  tape.backward(loss);

  // forward value equals the inference-path quantizer
  Tensor direct = dynamic_quantize_site(x, spec, g0, b0);
  CHECK(out->val.bit_equal(direct));

  // STE on x: d(loss)/dx_i = 2/(n) * (q_i - t_i) on in-range elements
  QuantParams p = fit_params(x, spec, g0, b0);
  const double n = static_cast<double>(x.size());
  for (int64_t i = 0; i < x.size(); ++i) {
    const int64_t g = i / 6;  // per-token groups
    const double s = p.scale[g], z = p.zero[g];
    const double pre = std::nearbyint(x[i] / s) + z;
    const bool in_range = pre >= 0.0 && pre <= 15.0;  // rounded code not clamped
    const double expect = in_range ? 2.0 / n * (direct[i] - tgt[i]) : 0.0;
    CHECK(vx->grad[i] == doctest::Approx(expect).epsilon(1e-4));
  }

  // gamma/beta get range-fit gradients: d loss/d gamma =
  // sum_i go_i (q_i - z) * max_g / qmax with the zero point and the integer
  // codes held constant (the declared straight-through rule). Re-derive
  // that sum with plain scalars.
  double want_dg = 0.0, want_db = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const int64_t g = i / 6;
    const double s = p.scale[g], z = p.zero[g];
    double mn = 1e300, mx = -1e300;
    for (int64_t j = g * 6; j < (g + 1) * 6; ++j) {
      mn = std::min(mn, static_cast<double>(x[j]));
      mx = std::max(mx, static_cast<double>(x[j]));
    }
    const double q = std::min(15.0, std::max(0.0, std::nearbyint(x[i] / s) + z));
    const double go = 2.0 / n * (direct[i] - tgt[i]);
    want_dg += go * (q - z) * mx / 15.0;
    want_db += go * (q - z) * (-mn) / 15.0;
  }
  CHECK(vg->grad[0] == doctest::Approx(want_dg).epsilon(1e-4));
  CHECK(vb->grad[0] == doctest::Approx(want_db).epsilon(1e-4));
}

TEST_CASE("static fake-quant gradients match finite differences") {
  Rng rng(6);
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Static, false, 0};
  Tensor x = rng.normal_tensor({2, 5}, 0.0, 1.0);
  Tensor tgt = rng.normal_tensor({2, 5}, 0.0, 1.0);
  Tensor s0({1}, {0.21f});
  Tensor z0({1}, {6.3f});  // continuous zero point during training

  Tape tape;
  Var vx = tape.leaf(x, true);
  Var vs = tape.leaf(s0, true);
  Var vz = tape.leaf(z0, true);
  Var loss = tape.mse_loss(tape.fake_quant_static(vx, vs, vz, spec), tgt);
  tape.backward(loss);

  // Declared rule: scale gets sum go (q - z); the continuous zero point only
  // contributes -s * go on clamped elements; x is pass-through in range.
  const double s = s0[0], z = z0[0];
  double want_ds = 0.0, want_dz = 0.0;
  Tensor out_ref(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const double q_pre = std::nearbyint(x[i] / s) + z;
    const double q = std::min(15.0, std::max(0.0, q_pre));
    out_ref[i] = static_cast<float>(s * (q - z));
  }
  for (int64_t i = 0; i < x.size(); ++i) {
    const double q_pre = std::nearbyint(x[i] / s) + z;
    const double q = std::min(15.0, std::max(0.0, q_pre));
    const double go = 2.0 / static_cast<double>(x.size()) * (out_ref[i] - tgt[i]);
    want_ds += go * (q - z);
    const bool clamped = q_pre < 0.0 || q_pre > 15.0;
    if (clamped) want_dz += go * (-s);
    CHECK(vx->grad[i] == doctest::Approx(clamped ? 0.0 : go).epsilon(1e-4));
  }
  CHECK(vs->grad[0] == doctest::Approx(want_ds).epsilon(1e-4));
  CHECK(vz->grad[0] == doctest::Approx(want_dz).epsilon(1e-4));
}

TEST_CASE("tape forward of a block is bit-exact with the inference path") {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.intermediate = 32;
  c.vocab = 300;
  c.max_seq = 64;
  Rng rng(21);
  ToyModel m = init_random_model(c, rng);
  QuantHookSet hooks = make_hooks(Scheme::O1, c, 4, 4, 4);

  Rng trng(3);
  std::vector<int> tokens(10);
  for (auto& t : tokens) t = trng.next_int(256);

  ActivationCapture cap;
  cap.want_block_input = cap.want_block_output = true;
  ForwardOptions opts;
  opts.capture = &cap;
  opts.hooks = &hooks;
  forward(m, tokens, opts);

  const int layer = 1;
  Tape tape;
  BlockVars vars = make_block_vars(tape, m, layer, hooks, true, true);
  Var x = tape.leaf(cap.block_input[static_cast<size_t>(layer)]);
  Var y = block_forward_tape(tape, m, layer, vars, x, 0, hooks, nullptr);
  CHECK(y->val.bit_equal(cap.block_output[static_cast<size_t>(layer)]));
}
