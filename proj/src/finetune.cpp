#include "pq/finetune.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace pq {

using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (epochs < 0) throw Error("epochs must be >= 0");
  if (batch_size < 1) throw Error("batch size must be >= 1");
  if (!(lr_qparams >= 0.0f) || !(lr_weights >= 0.0f)) throw Error("learning rates must be >= 0");
  if (divergence_factor <= 1.0f) throw Error("divergence factor must exceed 1");
  if (!train_weights && !train_qparams) throw Error("nothing to train");
}

BlockVars make_block_vars(Tape& tape, const ToyModel& model, int layer,
                          const QuantHookSet& hooks, bool train_weights, bool train_qparams) {
  const LayerWeights& w = model.layers[static_cast<size_t>(layer)];
  BlockVars v;
  v.q_proj = tape.leaf(w.q_proj, train_weights);
  v.k_proj = tape.leaf(w.k_proj, train_weights);
  v.v_proj = tape.leaf(w.v_proj, train_weights);
  v.o_proj = tape.leaf(w.o_proj, train_weights);
  v.gate_proj = tape.leaf(w.gate_proj, train_weights);
  v.up_proj = tape.leaf(w.up_proj, train_weights);
  v.down_proj = tape.leaf(w.down_proj, train_weights);
  v.input_norm = tape.leaf(w.input_norm, train_weights);
  v.post_norm = tape.leaf(w.post_norm, train_weights);
  for (const auto& [site, spec] : hooks.sites) {
    const QuantParams* p = hooks.find_params(layer, site);
    const bool is_static = spec.mode == QuantMode::Static && p && p->scale.size() > 0;
    v.site_static[site] = is_static;
    if (is_static) {
      v.site_params[site] = {tape.leaf(p->scale, train_qparams),
                             tape.leaf(p->zero, train_qparams)};
    } else {
      Tensor g({1}), b({1});
      g[0] = p ? p->gamma : 1.0f;
      b[0] = p ? p->beta : 1.0f;
      v.site_params[site] = {tape.leaf(g, train_qparams), tape.leaf(b, train_qparams)};
    }
  }
  return v;
}

Var block_forward_tape(Tape& tape, const ToyModel& model, int layer, const BlockVars& vars,
                       Var x, int pos0, const QuantHookSet& hooks, const PrefixCache* prefix) {
  const ModelConfig& cfg = model.config;
  const int t = x->val.dim(0), nh = cfg.n_heads, d = cfg.head_dim;

  auto hook = [&](const std::string& site, Var value) {
    auto it = hooks.sites.find(site);
    if (it == hooks.sites.end()) return value;
    const auto& [a, b] = vars.site_params.at(site);
    if (vars.site_static.at(site)) return tape.fake_quant_static(value, a, b, it->second);
    return tape.fake_quant_dynamic(value, a, b, it->second);
  };
  Var h = tape.rmsnorm(x, vars.input_norm, cfg.norm_eps);
  auto project = [&](const std::string& lin, Var weight) {
    Var in = hook("input:" + lin, h);
    return tape.matmul(in, hook("weight:" + lin, weight));
  };
  Var q = tape.reshape(project("q_proj", vars.q_proj), {t, nh, d});
  Var k = tape.reshape(project("k_proj", vars.k_proj), {t, nh, d});
  Var v = tape.reshape(project("v_proj", vars.v_proj), {t, nh, d});

  q = tape.rope_heads(q, pos0, cfg.rope_theta);
  k = tape.rope_heads(k, pos0, cfg.rope_theta);
  if (model.rotation.r3) {
    const HadamardSpec r3 = HadamardSpec::make(d, RotationSite::R3, model.rotation.seed);
    q = tape.online_rotate(q, r3);
    k = tape.online_rotate(k, r3);
  }
  q = hook("Q", q);
  k = hook("K", k);
  v = hook("V", v);

  Tensor pk, pv;
  if (prefix && prefix->length() > 0) {
    pk = prefix->keys[static_cast<size_t>(layer)];
    pv = prefix->values[static_cast<size_t>(layer)];
  }
  Var attn = tape.attention(q, k, v, pk, pv);
  Var attn2d = tape.reshape(attn, {t, cfg.hidden});
  attn2d = hook("input:o_proj", attn2d);
  Var wo = hook("weight:o_proj", vars.o_proj);
  Var x1 = tape.add(x, tape.matmul(attn2d, wo));

  Var h2 = tape.rmsnorm(x1, vars.post_norm, cfg.norm_eps);
  Var gate_in = hook("input:gate_proj", h2);
  Var up_in = hook("input:up_proj", h2);
  Var wg = hook("weight:gate_proj", vars.gate_proj);
  Var wu = hook("weight:up_proj", vars.up_proj);
  Var a = tape.mul(tape.silu(tape.matmul(gate_in, wg)), tape.matmul(up_in, wu));
  if (model.rotation.r4) {
    const HadamardSpec r4 =
        HadamardSpec::make(cfg.intermediate, RotationSite::R4, model.rotation.seed);
    a = tape.online_rotate(a, r4);
  }
  Var aq = hook("input:down_proj", a);
  Var wd = hook("weight:down_proj", vars.down_proj);
  return tape.add(x1, tape.matmul(aq, wd));
}

namespace {

struct AdamState {
  Tensor m, v;
  int t = 0;
};

void adam_step(Tensor& value, const Tensor& grad, AdamState& st, const TrainConfig& cfg,
               float lr) {
  if (st.m.empty()) {
    st.m = Tensor(value.shape());
    st.v = Tensor(value.shape());
  }
  st.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, st.t);
  const double c2 = 1.0 - std::pow(b2, st.t);
  for (int64_t i = 0; i < value.size(); ++i) {
    const double g = grad[i];
    st.m[i] = static_cast<float>(b1 * st.m[i] + (1.0 - b1) * g);
    st.v[i] = static_cast<float>(b2 * st.v[i] + (1.0 - b2) * g * g);
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    value[i] = static_cast<float>(value[i] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

void clamp_tensor(Tensor& t, float lo, float hi) {
  for (int64_t i = 0; i < t.size(); ++i) t[i] = std::min(hi, std::max(lo, t[i]));
}

Tensor embed(const ToyModel& model, const std::vector<int>& seq) {
  Tensor x({static_cast<int>(seq.size()), model.config.hidden});
  for (size_t i = 0; i < seq.size(); ++i) {
    const int id = seq[i];
    if (id < 0 || id >= model.config.vocab) {
      throw Error("token id " + std::to_string(id) + " out of vocab");
    }
    std::copy(&model.embedding(id, 0), &model.embedding(id, 0) + model.config.hidden,
              &x(static_cast<int>(i), 0));
  }
  return x;
}

Tensor run_block(const ToyModel& model, int layer, const Tensor& x, int pos0,
                 const QuantHookSet* hooks, const PrefixCache* prefix) {
  BlockKv kv;
  if (prefix && prefix->length() > 0) {
    kv.prefix_k = &prefix->keys[static_cast<size_t>(layer)];
    kv.prefix_v = &prefix->values[static_cast<size_t>(layer)];
  }
  return block_forward(model, layer, x, pos0, hooks, &kv, nullptr);
}

}  // namespace

FinetuneReport finetune_blocks(ToyModel& model, QuantHookSet& hooks,
                               const std::vector<std::vector<int>>& sequences,
                               const PrefixCache* prefix, const TrainConfig& cfg) {
  cfg.validate();
  hooks.validate();
  if (sequences.empty()) throw Error("fine-tuning needs at least one sequence");
  if (prefix && prefix->fingerprint != model.fingerprint()) {
    throw Error("prefix cache fingerprint does not match model");
  }

  FinetuneReport report;
  report.config = cfg;
  const ToyModel teacher = model;  // frozen full-precision reference
  const int pos0 = prefix ? prefix->length() : 0;
  const int nseq = static_cast<int>(sequences.size());
  Rng rng(cfg.seed ^ 0x66696e65ULL);

  std::vector<Tensor> xs_fp, xs_q;
  for (const auto& seq : sequences) {
    xs_fp.push_back(embed(teacher, seq));
    xs_q.push_back(xs_fp.back());
  }

  for (int l = 0; l < model.config.n_layers; ++l) {
    BlockTrainResult res;
    res.layer = l;

    std::vector<Tensor> targets;
    for (const Tensor& x : xs_fp) targets.push_back(run_block(teacher, l, x, pos0, nullptr, prefix));

    auto student_loss = [&] {
      double loss = 0.0;
      for (int s = 0; s < nseq; ++s) {
        loss += mse(run_block(model, l, xs_q[static_cast<size_t>(s)], pos0, &hooks, prefix),
                    targets[static_cast<size_t>(s)]);
      }
      return loss / nseq;
    };
    res.loss_before = student_loss();

    const LayerWeights snapshot_weights = model.layers[static_cast<size_t>(l)];
    const std::map<std::string, QuantParams> snapshot_params =
        l < static_cast<int>(hooks.layer_params.size())
            ? hooks.layer_params[static_cast<size_t>(l)]
            : std::map<std::string, QuantParams>{};

    std::map<std::string, AdamState> adam;
    std::vector<int> order(static_cast<size_t>(nseq));
    for (int i = 0; i < nseq; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      for (int i = nseq - 1; i > 0; --i) {
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.next_int(i + 1))]);
      }
      double epoch_loss = 0.0;
      int n_batches = 0;
      for (int start = 0; start < nseq; start += cfg.batch_size) {
        const int end = std::min(nseq, start + cfg.batch_size);
        Tape tape;
        BlockVars vars =
            make_block_vars(tape, model, l, hooks, cfg.train_weights, cfg.train_qparams);
        Var total;
        for (int bi = start; bi < end; ++bi) {
          const int s = order[static_cast<size_t>(bi)];
          Var x = tape.leaf(xs_q[static_cast<size_t>(s)]);
          Var out = block_forward_tape(tape, model, l, vars, x, pos0, hooks, prefix);
          Var loss = tape.mse_loss(out, targets[static_cast<size_t>(s)]);
          total = total ? tape.add(total, loss) : loss;
        }
        total = tape.scale(total, 1.0f / static_cast<float>(end - start));
        tape.backward(total);
        epoch_loss += total->val[0];
        ++n_batches;

        auto update = [&](const std::string& name, Var leaf, float lr,
                          const std::function<void(Tensor&)>& clamp) {
          if (!leaf->requires_grad || leaf->grad.empty()) return;
          Tensor value = leaf->val;
          adam_step(value, leaf->grad, adam[name], cfg, lr);
          if (clamp) clamp(value);
          leaf->val = value;  // make write-back below read the new value
        };
        if (cfg.train_weights) {
          LayerWeights& w = model.layers[static_cast<size_t>(l)];
          const std::pair<Var, Tensor*> weight_slots[] = {
              {vars.q_proj, &w.q_proj},       {vars.k_proj, &w.k_proj},
              {vars.v_proj, &w.v_proj},       {vars.o_proj, &w.o_proj},
              {vars.gate_proj, &w.gate_proj}, {vars.up_proj, &w.up_proj},
              {vars.down_proj, &w.down_proj}, {vars.input_norm, &w.input_norm},
              {vars.post_norm, &w.post_norm}};
          int wi = 0;
          for (const auto& [leaf, dst] : weight_slots) {
            update("w" + std::to_string(wi++), leaf, cfg.lr_weights, {});
            *dst = leaf->val;
          }
        }
        if (cfg.train_qparams) {
          for (auto& [site, pair] : vars.site_params) {
            const QuantSpec& spec = hooks.sites.at(site);
            QuantParams p;
            if (vars.site_static.at(site)) {
              update(site + ":s", pair.first, cfg.lr_qparams,
                     [](Tensor& t) { clamp_tensor(t, 1e-8f, 1e30f); });
              update(site + ":z", pair.second, cfg.lr_qparams, [&](Tensor& t) {
                clamp_tensor(t, 0.0f, static_cast<float>(spec.qmax()));
              });
              p.scale = pair.first->val;
              p.zero = pair.second->val;
              const QuantParams* old = hooks.find_params(l, site);
              if (old) {
                p.gamma = old->gamma;
                p.beta = old->beta;
              }
            } else {
              update(site + ":g", pair.first, cfg.lr_qparams,
                     [](Tensor& t) { clamp_tensor(t, 0.0f, 1.0f); });
              update(site + ":b", pair.second, cfg.lr_qparams,
                     [](Tensor& t) { clamp_tensor(t, 0.0f, 1.0f); });
              p.gamma = pair.first->val[0];
              p.beta = pair.second->val[0];
            }
            hooks.set_params(l, site, std::move(p));
          }
        }
      }
      epoch_loss /= std::max(1, n_batches);
      res.loss_curve.push_back(epoch_loss);
      if (!std::isfinite(epoch_loss) ||
          epoch_loss > cfg.divergence_factor * std::max(res.loss_before, 1e-12)) {
        res.diverged = true;
        model.layers[static_cast<size_t>(l)] = snapshot_weights;
        if (l < static_cast<int>(hooks.layer_params.size())) {
          hooks.layer_params[static_cast<size_t>(l)] = snapshot_params;
        }
        break;
      }
    }

    // zero points trained as reals come back to the integer grid here
    if (!res.diverged && cfg.train_qparams) {
      for (const auto& [site, spec] : hooks.sites) {
        const QuantParams* p = hooks.find_params(l, site);
        if (!p || p->scale.size() == 0) continue;
        QuantParams rounded = *p;
        for (int64_t i = 0; i < rounded.zero.size(); ++i) {
          rounded.zero[i] = static_cast<float>(std::min<double>(
              spec.qmax(), std::max<double>(0.0, std::nearbyint(rounded.zero[i]))));
        }
        hooks.set_params(l, site, std::move(rounded));
      }
    }
    res.loss_after = student_loss();
    report.blocks.push_back(std::move(res));

    for (int s = 0; s < nseq; ++s) {
      xs_fp[static_cast<size_t>(s)] = targets[static_cast<size_t>(s)];
      xs_q[static_cast<size_t>(s)] =
          run_block(model, l, xs_q[static_cast<size_t>(s)], pos0, &hooks, prefix);
    }
  }
  return report;
}

std::string finetune_report_json(const FinetuneReport& report) {
  json j;
  j["epochs"] = report.config.epochs;
  j["batch_size"] = report.config.batch_size;
  j["lr_qparams"] = report.config.lr_qparams;
  j["lr_weights"] = report.config.lr_weights;
  json blocks = json::array();
  for (const auto& b : report.blocks) {
    blocks.push_back(json{{"layer", b.layer},
                          {"loss_before", b.loss_before},
                          {"loss_after", b.loss_after},
                          {"diverged", b.diverged},
                          {"loss_curve", b.loss_curve}});
  }
  j["blocks"] = std::move(blocks);
  return j.dump(2);
}

}  // namespace pq
