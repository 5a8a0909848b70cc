#include "pq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pq/prefix.hpp"
#include "pq/rotation.hpp"

namespace pq {

using json = nlohmann::ordered_json;

void ModelConfig::validate() const {
  if (n_layers < 1) throw Error("n_layers must be >= 1");
  if (hidden != n_heads * head_dim) throw Error("hidden must equal n_heads * head_dim");
  if (!is_power_of_two(hidden) || !is_power_of_two(head_dim) || !is_power_of_two(intermediate)) {
    throw Error("hidden, head_dim and intermediate must be powers of two");
  }
  if (vocab < 2 || max_seq < 1) throw Error("bad vocab/max_seq");
  if (head_dim % 2 != 0) throw Error("head_dim must be even for RoPE");
}

static void require_shape(const Tensor& t, std::vector<int> shape, const std::string& name) {
  if (t.shape() != shape) {
    throw Error("tensor " + name + " has shape " + shape_to_string(t.shape()) + ", expected " +
                shape_to_string(shape));
  }
}

void ToyModel::validate() const {
  config.validate();
  if (static_cast<int>(layers.size()) != config.n_layers) throw Error("layer count mismatch");
  const int h = config.hidden, im = config.intermediate;
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& w = layers[static_cast<size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";
    require_shape(w.q_proj, {h, h}, p + "q_proj");
    require_shape(w.k_proj, {h, h}, p + "k_proj");
    require_shape(w.v_proj, {h, h}, p + "v_proj");
    require_shape(w.o_proj, {h, h}, p + "o_proj");
    require_shape(w.gate_proj, {h, im}, p + "gate_proj");
    require_shape(w.up_proj, {h, im}, p + "up_proj");
    require_shape(w.down_proj, {im, h}, p + "down_proj");
    require_shape(w.input_norm, {h}, p + "input_norm");
    require_shape(w.post_norm, {h}, p + "post_norm");
  }
  require_shape(embedding, {config.vocab, h}, "embedding");
  require_shape(final_norm, {h}, "final_norm");
  require_shape(lm_head, {h, config.vocab}, "lm_head");
}

static uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

static uint64_t fnv1a_tensor(uint64_t h, const Tensor& t) {
  return fnv1a(h, t.data(), static_cast<size_t>(t.size()) * sizeof(float));
}

uint64_t ToyModel::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  int cfg[] = {config.n_layers, config.hidden, config.n_heads, config.head_dim,
               config.intermediate, config.vocab, config.max_seq};
  h = fnv1a(h, cfg, sizeof(cfg));
  float fcfg[] = {config.rope_theta, config.norm_eps};
  h = fnv1a(h, fcfg, sizeof(fcfg));
  uint64_t rot[] = {static_cast<uint64_t>(rotation.r1), static_cast<uint64_t>(rotation.r2),
                    static_cast<uint64_t>(rotation.r3), static_cast<uint64_t>(rotation.r4),
                    rotation.seed};
  h = fnv1a(h, rot, sizeof(rot));
  for (const auto& w : layers) {
    for (const Tensor* t : {&w.q_proj, &w.k_proj, &w.v_proj, &w.o_proj, &w.gate_proj, &w.up_proj,
                            &w.down_proj, &w.input_norm, &w.post_norm}) {
      h = fnv1a_tensor(h, *t);
    }
  }
  h = fnv1a_tensor(h, embedding);
  h = fnv1a_tensor(h, final_norm);
  h = fnv1a_tensor(h, lm_head);
  return h;
}

// ---- hooks -----------------------------------------------------------------

const std::vector<std::string>& QuantHookSet::known_sites() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const char* lin :
         {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"}) {
      v.push_back(std::string("weight:") + lin);
      v.push_back(std::string("input:") + lin);
    }
    v.emplace_back("Q");
    v.emplace_back("K");
    v.emplace_back("V");
    return v;
  }();
  return names;
}

void QuantHookSet::validate() const {
  const auto& known = known_sites();
  for (const auto& [site, spec] : sites) {
    if (std::find(known.begin(), known.end(), site) == known.end()) {
      throw Error("unknown quantization site: " + site);
    }
    if (spec.bits < 2 || spec.bits > 16) throw Error("bits must lie in 2..16 at site " + site);
    const bool is_weight = site.rfind("weight:", 0) == 0;
    const bool is_kv = (site == "Q" || site == "K" || site == "V");
    if (is_weight) {
      if (spec.gran == Granularity::PerToken || spec.gran == Granularity::PerHead) {
        throw Error(std::string(granularity_name(spec.gran)) + " is not valid on weight site " +
                    site);
      }
    } else if (!is_kv) {
      if (spec.gran == Granularity::PerChannel || spec.gran == Granularity::Group ||
          spec.gran == Granularity::PerHead) {
        throw Error(std::string(granularity_name(spec.gran)) +
                    " is not valid on activation site " + site);
      }
    } else {
      if (spec.gran == Granularity::PerChannel) {
        throw Error("per_channel is not valid on KV site " + site);
      }
    }
  }
}

const QuantParams* QuantHookSet::find_params(int layer, const std::string& site) const {
  if (layer < 0 || layer >= static_cast<int>(layer_params.size())) return nullptr;
  auto it = layer_params[static_cast<size_t>(layer)].find(site);
  return it == layer_params[static_cast<size_t>(layer)].end() ? nullptr : &it->second;
}

void QuantHookSet::set_params(int layer, const std::string& site, QuantParams p) {
  if (layer >= static_cast<int>(layer_params.size())) {
    layer_params.resize(static_cast<size_t>(layer) + 1);
  }
  layer_params[static_cast<size_t>(layer)][site] = std::move(p);
}

/// Fake-quantizes x at (layer, site) if hooked; identity otherwise.
static Tensor apply_hook(const QuantHookSet* hooks, int layer, const std::string& site,
                         const Tensor& x) {
  if (!hooks) return x;
  auto it = hooks->sites.find(site);
  if (it == hooks->sites.end()) return x;
  const QuantSpec& spec = it->second;
  const QuantParams* p = hooks->find_params(layer, site);
  if (spec.mode == QuantMode::Static && p && p->scale.size() > 0) {
    return fake_quant(x, *p, spec);
  }
  const float g = p ? p->gamma : 1.0f;
  const float b = p ? p->beta : 1.0f;
  return dynamic_quantize_site(x, spec, g, b);
}

// ---- init ------------------------------------------------------------------

ToyModel init_random_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ToyModel m;
  m.config = config;
  const int h = config.hidden, im = config.intermediate;
  const double std_in = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * config.n_layers);
  m.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& w : m.layers) {
    w.q_proj = rng.normal_tensor({h, h}, 0.0, std_in);
    w.k_proj = rng.normal_tensor({h, h}, 0.0, std_in);
    w.v_proj = rng.normal_tensor({h, h}, 0.0, std_in);
    w.o_proj = rng.normal_tensor({h, h}, 0.0, std_res);
    w.gate_proj = rng.normal_tensor({h, im}, 0.0, std_in);
    w.up_proj = rng.normal_tensor({h, im}, 0.0, std_in);
    w.down_proj = rng.normal_tensor({im, h}, 0.0, std_res);
    w.input_norm = Tensor::full({h}, 1.0f);
    w.post_norm = Tensor::full({h}, 1.0f);
  }
  m.embedding = rng.normal_tensor({config.vocab, h}, 0.0, std_in);
  m.final_norm = Tensor::full({h}, 1.0f);
  m.lm_head = rng.normal_tensor({h, config.vocab}, 0.0, std_in);
  return m;
}

// ---- forward ---------------------------------------------------------------

Tensor rope_heads(const Tensor& x, int pos0, float theta) {
  const int t = x.dim(0), nh = x.dim(1), d = x.dim(2);
  Tensor out({t, nh, d});
  Tensor row({1, d});
  for (int i = 0; i < t; ++i) {
    for (int h = 0; h < nh; ++h) {
      std::memcpy(row.data(), &x(i, h, 0), static_cast<size_t>(d) * sizeof(float));
      Tensor r = rope_apply(row, pos0 + i, theta);
      std::memcpy(&out(i, h, 0), r.data(), static_cast<size_t>(d) * sizeof(float));
    }
  }
  return out;
}

static Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  std::vector<int> shape = a.shape();
  shape[0] += b.dim(0);
  Tensor out(shape);
  std::memcpy(out.data(), a.data(), static_cast<size_t>(a.size()) * sizeof(float));
  std::memcpy(out.data() + a.size(), b.data(), static_cast<size_t>(b.size()) * sizeof(float));
  return out;
}

Tensor block_forward(const ToyModel& model, int layer, const Tensor& x, int pos0,
                     const QuantHookSet* hooks, const BlockKv* kv, ActivationCapture* capture) {
  const ModelConfig& cfg = model.config;
  const LayerWeights& w = model.layers[static_cast<size_t>(layer)];
  const int t = x.dim(0), nh = cfg.n_heads, d = cfg.head_dim;

  auto cap_linear = [&](const char* name, const Tensor& v) {
    if (capture && capture->want_linear_inputs) {
      capture->linear_inputs[static_cast<size_t>(layer)][name] = v;
    }
  };
  if (capture && capture->want_block_input) capture->block_input[static_cast<size_t>(layer)] = x;

  const Tensor h = rmsnorm(x, w.input_norm, cfg.norm_eps);
  cap_linear("q_proj", h);
  cap_linear("k_proj", h);
  cap_linear("v_proj", h);

  auto project = [&](const char* lin, const Tensor& weight) {
    const Tensor in = apply_hook(hooks, layer, std::string("input:") + lin, h);
    const Tensor wq = apply_hook(hooks, layer, std::string("weight:") + lin, weight);
    return matmul(in, wq);
  };
  Tensor q = project("q_proj", w.q_proj).reshape({t, nh, d});
  Tensor k = project("k_proj", w.k_proj).reshape({t, nh, d});
  Tensor v = project("v_proj", w.v_proj).reshape({t, nh, d});

  q = rope_heads(q, pos0, cfg.rope_theta);
  k = rope_heads(k, pos0, cfg.rope_theta);
  if (model.rotation.r3) {
    const HadamardSpec r3 = HadamardSpec::make(d, RotationSite::R3, model.rotation.seed);
    q = online_rotate(q, r3);
    k = online_rotate(k, r3);
  }
  if (capture && capture->want_qk) {
    capture->q[static_cast<size_t>(layer)] = q;
    capture->k[static_cast<size_t>(layer)] = k;
    capture->v[static_cast<size_t>(layer)] = v;
  }
  q = apply_hook(hooks, layer, "Q", q);
  k = apply_hook(hooks, layer, "K", k);
  v = apply_hook(hooks, layer, "V", v);
  if (kv) {
    if (kv->new_k) *kv->new_k = k;
    if (kv->new_v) *kv->new_v = v;
  }

  Tensor all_k = k, all_v = v;
  Tensor prefix_k, prefix_v;
  if (kv) {
    if (kv->past_k) all_k = concat_tokens(*kv->past_k, k);
    if (kv->past_v) all_v = concat_tokens(*kv->past_v, v);
    if (kv->prefix_k) prefix_k = *kv->prefix_k;
    if (kv->prefix_v) prefix_v = *kv->prefix_v;
  }
  Tensor attn = attention_with_prefix(q, all_k, all_v, prefix_k, prefix_v);
  Tensor attn2d = attn.reshape({t, cfg.hidden});
  cap_linear("o_proj", attn2d);
  attn2d = apply_hook(hooks, layer, "input:o_proj", attn2d);
  const Tensor wo = apply_hook(hooks, layer, "weight:o_proj", w.o_proj);
  Tensor x1 = add(x, matmul(attn2d, wo));

  const Tensor h2 = rmsnorm(x1, w.post_norm, cfg.norm_eps);
  cap_linear("gate_proj", h2);
  cap_linear("up_proj", h2);
  const Tensor gate_in = apply_hook(hooks, layer, "input:gate_proj", h2);
  const Tensor up_in = apply_hook(hooks, layer, "input:up_proj", h2);
  const Tensor wg = apply_hook(hooks, layer, "weight:gate_proj", w.gate_proj);
  const Tensor wu = apply_hook(hooks, layer, "weight:up_proj", w.up_proj);
  Tensor a = mul(silu(matmul(gate_in, wg)), matmul(up_in, wu));
  if (model.rotation.r4) {
    const HadamardSpec r4 =
        HadamardSpec::make(cfg.intermediate, RotationSite::R4, model.rotation.seed);
    a = online_rotate(a, r4);
  }
  if (capture && capture->want_down_proj_input) {
    capture->down_proj_input[static_cast<size_t>(layer)] = a;
  }
  cap_linear("down_proj", a);
  const Tensor a_q = apply_hook(hooks, layer, "input:down_proj", a);
  const Tensor wd = apply_hook(hooks, layer, "weight:down_proj", w.down_proj);
  Tensor out = add(x1, matmul(a_q, wd));
  if (capture && capture->want_block_output) {
    capture->block_output[static_cast<size_t>(layer)] = out;
  }
  return out;
}

Tensor forward(const ToyModel& model, const std::vector<int>& tokens, const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (opts.hooks) opts.hooks->validate();
  const int t = static_cast<int>(tokens.size());
  if (t < 1) throw Error("forward needs at least one token");
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab) throw Error("token id " + std::to_string(id) + " out of vocab");
  }
  const int prefix_len = opts.prefix ? opts.prefix->length() : 0;
  const int cache_len = opts.cache ? opts.cache->length : 0;
  if (prefix_len + cache_len + t > cfg.max_seq) {
    throw Error("sequence overflow: " + std::to_string(prefix_len + cache_len + t) + " > max_seq " +
                std::to_string(cfg.max_seq));
  }
  if (opts.prefix && opts.prefix->fingerprint != model.fingerprint()) {
    throw Error("prefix cache fingerprint does not match model");
  }
  if (opts.cache && opts.cache->keys.empty()) {
    opts.cache->keys.resize(static_cast<size_t>(cfg.n_layers));
    opts.cache->values.resize(static_cast<size_t>(cfg.n_layers));
  }
  if (opts.capture) {
    auto* c = opts.capture;
    const auto n = static_cast<size_t>(cfg.n_layers);
    if (c->want_block_input) c->block_input.assign(n, {});
    if (c->want_block_output) c->block_output.assign(n, {});
    if (c->want_down_proj_input) c->down_proj_input.assign(n, {});
    if (c->want_qk) {
      c->q.assign(n, {});
      c->k.assign(n, {});
      c->v.assign(n, {});
    }
    if (c->want_linear_inputs) c->linear_inputs.assign(n, {});
  }

  Tensor x({t, cfg.hidden});
  for (int i = 0; i < t; ++i) {
    std::memcpy(&x(i, 0), &model.embedding(tokens[static_cast<size_t>(i)], 0),
                static_cast<size_t>(cfg.hidden) * sizeof(float));
  }

  const int pos0 = prefix_len + cache_len;
  for (int l = 0; l < cfg.n_layers; ++l) {
    BlockKv kv;
    Tensor new_k, new_v;
    kv.new_k = &new_k;
    kv.new_v = &new_v;
    if (opts.prefix && prefix_len > 0) {
      kv.prefix_k = &opts.prefix->keys[static_cast<size_t>(l)];
      kv.prefix_v = &opts.prefix->values[static_cast<size_t>(l)];
    }
    if (opts.cache && cache_len > 0) {
      kv.past_k = &opts.cache->keys[static_cast<size_t>(l)];
      kv.past_v = &opts.cache->values[static_cast<size_t>(l)];
    }
    x = block_forward(model, l, x, pos0, opts.hooks, &kv, opts.capture);
    if (opts.cache) {
      auto& ck = opts.cache->keys[static_cast<size_t>(l)];
      auto& cv = opts.cache->values[static_cast<size_t>(l)];
      ck = ck.empty() ? new_k : concat_tokens(ck, new_k);
      cv = cv.empty() ? new_v : concat_tokens(cv, new_v);
    }
  }
  if (opts.cache) opts.cache->length = cache_len + t;

  const Tensor xn = rmsnorm(x, model.final_norm, cfg.norm_eps);
  return matmul(xn, model.lm_head);
}

double perplexity(const ToyModel& model, const std::vector<int>& corpus,
                  const QuantHookSet* hooks, const PrefixCache* prefix, int context_len) {
  if (static_cast<int>(corpus.size()) < context_len + 1) {
    throw Error("corpus too short for context length " + std::to_string(context_len));
  }
  double nll = 0.0;
  int64_t count = 0;
  const int64_t n = static_cast<int64_t>(corpus.size());
  for (int64_t w = 0; w + context_len < n; w += context_len) {
    std::vector<int> window(corpus.begin() + w, corpus.begin() + w + context_len);
    ForwardOptions opts;
    opts.hooks = hooks;
    opts.prefix = prefix;
    Tensor logits = forward(model, window, opts);
    const int vocab = logits.dim(1);
    for (int i = 0; i < context_len; ++i) {
      const int target = corpus[static_cast<size_t>(w + i + 1)];
      double mx = logits(i, 0);
      for (int j = 1; j < vocab; ++j) mx = std::max<double>(mx, logits(i, j));
      double sum = 0.0;
      for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
      nll -= static_cast<double>(logits(i, target)) - mx - std::log(sum);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

std::vector<int> tokenize(const std::string& bytes) {
  std::vector<int> out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(static_cast<int>(c));
  return out;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (id < 0 || id > 255) throw Error("token id " + std::to_string(id) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

// ---- container I/O -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'Q', 'T', 'M'};
constexpr uint32_t kVersion = 1;

struct TensorEntry {
  std::string name;
  const Tensor* tensor;
};

void collect_tensors(const ToyModel& m, std::vector<TensorEntry>& out) {
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const auto& w = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "q_proj", &w.q_proj});
    out.push_back({p + "k_proj", &w.k_proj});
    out.push_back({p + "v_proj", &w.v_proj});
    out.push_back({p + "o_proj", &w.o_proj});
    out.push_back({p + "gate_proj", &w.gate_proj});
    out.push_back({p + "up_proj", &w.up_proj});
    out.push_back({p + "down_proj", &w.down_proj});
    out.push_back({p + "input_norm", &w.input_norm});
    out.push_back({p + "post_norm", &w.post_norm});
  }
  out.push_back({"embedding", &m.embedding});
  out.push_back({"final_norm", &m.final_norm});
  out.push_back({"lm_head", &m.lm_head});
}

json spec_to_json(const QuantSpec& s) {
  return json{{"bits", s.bits},
              {"granularity", granularity_name(s.gran)},
              {"mode", s.mode == QuantMode::Dynamic ? "dynamic" : "static"},
              {"symmetric", s.symmetric},
              {"group_size", s.group_size}};
}

QuantSpec spec_from_json(const json& j) {
  QuantSpec s;
  s.bits = j.at("bits").get<int>();
  s.gran = granularity_from_name(j.at("granularity").get<std::string>());
  s.mode = j.at("mode").get<std::string>() == "dynamic" ? QuantMode::Dynamic : QuantMode::Static;
  s.symmetric = j.at("symmetric").get<bool>();
  s.group_size = j.at("group_size").get<int>();
  return s;
}

}  // namespace

void save_model(const ToyModel& model, const std::string& path, const QuantHookSet* hooks) {
  model.validate();
  std::vector<TensorEntry> entries;
  collect_tensors(model, entries);

  // qparams serialize as extra tensors under a "qparams/" name prefix
  std::vector<std::pair<std::string, Tensor>> extra;
  json quant_meta;
  if (hooks && !hooks->empty()) {
    hooks->validate();
    json sites = json::object();
    for (const auto& [name, spec] : hooks->sites) sites[name] = spec_to_json(spec);
    json clips = json::array();
    for (size_t l = 0; l < hooks->layer_params.size(); ++l) {
      json layer = json::object();
      for (const auto& [site, p] : hooks->layer_params[l]) {
        layer[site] = json{{"gamma", p.gamma}, {"beta", p.beta}, {"fitted", p.scale.size() > 0}};
        if (p.scale.size() > 0) {
          const std::string base = "qparams/" + std::to_string(l) + "/" + site + "/";
          extra.emplace_back(base + "scale", p.scale);
          extra.emplace_back(base + "zero", p.zero);
        }
      }
      clips.push_back(std::move(layer));
    }
    quant_meta = json{{"sites", std::move(sites)}, {"layer_params", std::move(clips)}};
  }

  json header;
  header["config"] = json{{"n_layers", model.config.n_layers},
                          {"hidden", model.config.hidden},
                          {"n_heads", model.config.n_heads},
                          {"head_dim", model.config.head_dim},
                          {"intermediate", model.config.intermediate},
                          {"vocab", model.config.vocab},
                          {"max_seq", model.config.max_seq},
                          {"rope_theta", model.config.rope_theta},
                          {"norm_eps", model.config.norm_eps}};
  header["rotation"] = json{{"r1", model.rotation.r1},
                            {"r2", model.rotation.r2},
                            {"r3", model.rotation.r3},
                            {"r4", model.rotation.r4},
                            {"seed", model.rotation.seed}};
  if (!quant_meta.is_null()) header["quant"] = quant_meta;

  json tensors = json::object();
  uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor& t) {
    const uint64_t bytes = static_cast<uint64_t>(t.size()) * sizeof(float);
    tensors[name] =
        json{{"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}, {"length", bytes}};
    offset += bytes;
  };
  for (const auto& e : entries) add_entry(e.name, *e.tensor);
  for (const auto& [name, t] : extra) add_entry(name, t);
  header["tensors"] = std::move(tensors);

  const std::string hdr = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(kMagic, 4);
  uint32_t ver = kVersion;
  f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  uint64_t hlen = hdr.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& e : entries) {
    f.write(reinterpret_cast<const char*>(e.tensor->data()),
            static_cast<std::streamsize>(e.tensor->size() * sizeof(float)));
  }
  for (const auto& [name, t] : extra) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!f) throw Error("write failed for " + path);
}

ToyModel load_model(const std::string& path, QuantHookSet* hooks_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open model file: " + path);
  f.seekg(0, std::ios::end);
  const int64_t file_size = f.tellg();
  f.seekg(0);
  char magic[4];
  uint32_t ver = 0;
  uint64_t hlen = 0;
  if (file_size < 16 || !f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error("bad magic in " + path + ": not a model container");
  }
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kVersion) throw Error("unsupported container version " + std::to_string(ver));
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (16 + static_cast<int64_t>(hlen) > file_size) {
    throw Error("truncated container: header length exceeds file size");
  }
  std::string hdr(hlen, '\0');
  f.read(hdr.data(), static_cast<std::streamsize>(hlen));
  json header;
  try {
    header = json::parse(hdr);
  } catch (const std::exception& e) {
    throw Error(std::string("bad container header JSON: ") + e.what());
  }

  ToyModel m;
  const json& c = header.at("config");
  m.config.n_layers = c.at("n_layers").get<int>();
  m.config.hidden = c.at("hidden").get<int>();
  m.config.n_heads = c.at("n_heads").get<int>();
  m.config.head_dim = c.at("head_dim").get<int>();
  m.config.intermediate = c.at("intermediate").get<int>();
  m.config.vocab = c.at("vocab").get<int>();
  m.config.max_seq = c.at("max_seq").get<int>();
  m.config.rope_theta = c.at("rope_theta").get<float>();
  m.config.norm_eps = c.at("norm_eps").get<float>();
  const json& r = header.at("rotation");
  m.rotation.r1 = r.at("r1").get<bool>();
  m.rotation.r2 = r.at("r2").get<bool>();
  m.rotation.r3 = r.at("r3").get<bool>();
  m.rotation.r4 = r.at("r4").get<bool>();
  m.rotation.seed = r.at("seed").get<uint64_t>();

  const int64_t payload_start = 16 + static_cast<int64_t>(hlen);
  const int64_t payload_size = file_size - payload_start;
  auto read_tensor = [&](const std::string& name) {
    const json& tj = header.at("tensors").at(name);
    if (tj.at("dtype").get<std::string>() != "f32") throw Error("unsupported dtype for " + name);
    std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
    const uint64_t off = tj.at("offset").get<uint64_t>();
    const uint64_t len = tj.at("length").get<uint64_t>();
    if (static_cast<int64_t>(off + len) > payload_size) {
      throw Error("truncated container: tensor " + name + " extends past end of file");
    }
    Tensor t(shape);
    if (static_cast<uint64_t>(t.size()) * sizeof(float) != len) {
      throw Error("shape/offset inconsistency for tensor " + name);
    }
    f.seekg(payload_start + static_cast<int64_t>(off));
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(len));
    if (!f) throw Error("read failed for tensor " + name);
    t.check_finite("tensor " + name + " from " + path);
    return t;
  };

  m.layers.resize(static_cast<size_t>(m.config.n_layers));
  for (int l = 0; l < m.config.n_layers; ++l) {
    auto& w = m.layers[static_cast<size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";
    w.q_proj = read_tensor(p + "q_proj");
    w.k_proj = read_tensor(p + "k_proj");
    w.v_proj = read_tensor(p + "v_proj");
    w.o_proj = read_tensor(p + "o_proj");
    w.gate_proj = read_tensor(p + "gate_proj");
    w.up_proj = read_tensor(p + "up_proj");
    w.down_proj = read_tensor(p + "down_proj");
    w.input_norm = read_tensor(p + "input_norm");
    w.post_norm = read_tensor(p + "post_norm");
  }
  m.embedding = read_tensor("embedding");
  m.final_norm = read_tensor("final_norm");
  m.lm_head = read_tensor("lm_head");
  m.validate();

  if (hooks_out) {
    *hooks_out = QuantHookSet{};
    if (header.contains("quant")) {
      const json& q = header.at("quant");
      for (auto it = q.at("sites").begin(); it != q.at("sites").end(); ++it) {
        hooks_out->sites[it.key()] = spec_from_json(it.value());
      }
      const json& clips = q.at("layer_params");
      for (size_t l = 0; l < clips.size(); ++l) {
        for (auto it = clips[l].begin(); it != clips[l].end(); ++it) {
          QuantParams p;
          p.gamma = it.value().at("gamma").get<float>();
          p.beta = it.value().at("beta").get<float>();
          if (it.value().at("fitted").get<bool>()) {
            const std::string base = "qparams/" + std::to_string(l) + "/" + it.key() + "/";
            p.scale = read_tensor(base + "scale");
            p.zero = read_tensor(base + "zero");
          }
          hooks_out->set_params(static_cast<int>(l), it.key(), std::move(p));
        }
      }
      hooks_out->validate();
    }
  }
  return m;
}

}  // namespace pq
