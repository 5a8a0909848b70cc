#include "pq/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <thread>

#include <json.hpp>

namespace pq {

using json = nlohmann::ordered_json;

void CalibConfig::validate() const {
  if (!(grid_lo > 0.0f) || grid_hi > 1.0f || grid_lo > grid_hi) {
    throw Error("clipping grid must satisfy 0 < lo <= hi <= 1");
  }
  if (!(grid_step > 0.0f)) throw Error("grid step must be positive");
  if (static_scale_points < 1) throw Error("static scale grid needs >= 1 points");
  if (static_scale_span < 1.0f) throw Error("static scale span must be >= 1");
}

int thread_limit() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("PREFIXQUANT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 0) {
      throw Error(std::string("PREFIXQUANT_THREADS must be a non-negative integer, got '") + env +
                  "'");
    }
    if (cap >= 1 && cap < hw) hw = static_cast<int>(cap);
    if (cap == 0 || cap == 1) hw = 1;
  }
  return hw;
}

namespace {

/// Runs fn(i) for i in [0, n); work is strided across threads and every
/// result lands in a caller-indexed slot, so the outcome does not depend on
/// the worker count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int workers = static_cast<int>(std::min<int64_t>(thread_limit(), n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int64_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

double sse(const Tensor& a, const Tensor& b) {
  return mse(a, b) * static_cast<double>(a.size());
}

std::vector<float> clip_grid(const CalibConfig& cfg) {
  std::vector<float> grid;
  const int n = static_cast<int>(std::lround((cfg.grid_hi - cfg.grid_lo) / cfg.grid_step)) + 1;
  for (int i = 0; i < n; ++i) {
    grid.push_back(std::min(cfg.grid_hi, cfg.grid_lo + static_cast<float>(i) * cfg.grid_step));
  }
  if (grid.empty() || grid.back() != cfg.grid_hi) grid.push_back(cfg.grid_hi);
  return grid;
}

struct LayerCapture {
  // one entry per calibration sequence
  std::vector<std::map<std::string, Tensor>> linear_inputs;
  std::vector<Tensor> q, k, v;
};

LayerCapture capture_layer(const ToyModel& model, int layer, const std::vector<Tensor>& xs,
                           const PrefixCache* prefix, const QuantHookSet& hooks) {
  LayerCapture out;
  const auto n_layers = static_cast<size_t>(model.config.n_layers);
  const int pos0 = prefix ? prefix->length() : 0;
  for (const Tensor& x : xs) {
    ActivationCapture cap;
    cap.want_linear_inputs = true;
    cap.want_qk = true;
    cap.linear_inputs.assign(n_layers, {});
    cap.q.assign(n_layers, {});
    cap.k.assign(n_layers, {});
    cap.v.assign(n_layers, {});
    BlockKv kv;
    if (prefix && prefix->length() > 0) {
      kv.prefix_k = &prefix->keys[static_cast<size_t>(layer)];
      kv.prefix_v = &prefix->values[static_cast<size_t>(layer)];
    }
    block_forward(model, layer, x, pos0, &hooks, &kv, &cap);
    out.linear_inputs.push_back(std::move(cap.linear_inputs[static_cast<size_t>(layer)]));
    out.q.push_back(std::move(cap.q[static_cast<size_t>(layer)]));
    out.k.push_back(std::move(cap.k[static_cast<size_t>(layer)]));
    out.v.push_back(std::move(cap.v[static_cast<size_t>(layer)]));
  }
  return out;
}

Tensor concat_axis0(const std::vector<Tensor>& parts) {
  std::vector<int> shape = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) total += p.dim(0);
  shape[0] = total;
  Tensor out(shape);
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + off);
    off += p.size();
  }
  return out;
}

const Tensor& weight_of(const LayerWeights& w, const std::string& lin) {
  if (lin == "q_proj") return w.q_proj;
  if (lin == "k_proj") return w.k_proj;
  if (lin == "v_proj") return w.v_proj;
  if (lin == "o_proj") return w.o_proj;
  if (lin == "gate_proj") return w.gate_proj;
  if (lin == "up_proj") return w.up_proj;
  if (lin == "down_proj") return w.down_proj;
  throw Error("unknown linear: " + lin);
}

/// Weight sites: single clipping factor, objective || x W - x q(W) ||^2
/// against the captured (already error-propagated) inputs.
SiteCalibration fit_weight_site(const Tensor& w, const QuantSpec& spec, const Tensor& x,
                                const CalibConfig& cfg, QuantParams& out) {
  const Tensor ref = matmul(x, w);
  const std::vector<float> grid = clip_grid(cfg);
  std::vector<double> err(grid.size());
  parallel_for(static_cast<int64_t>(grid.size()), [&](int64_t i) {
    const float c = grid[static_cast<size_t>(i)];
    const Tensor wq = fake_quant(w, fit_params(w, spec, c, c), spec);
    err[static_cast<size_t>(i)] = sse(matmul(x, wq), ref);
  });
  size_t best = 0;
  for (size_t i = 1; i < grid.size(); ++i) {
    if (err[i] <= err[best]) best = i;  // ties prefer the larger factor
  }
  SiteCalibration r;
  r.gamma = r.beta = grid[best];
  {
    const Tensor wq = fake_quant(w, fit_params(w, spec, 1.0f, 1.0f), spec);
    r.err_before = sse(matmul(x, wq), ref) / static_cast<double>(ref.size());
  }
  r.err_after = err[best] / static_cast<double>(ref.size());
  out = fit_params(w, spec, grid[best], grid[best]);
  return r;
}

/// Dynamic activation sites: clipping grid against the site reconstruction
/// error, quantizing each sequence separately the way inference will.
SiteCalibration fit_dynamic_site(const std::vector<Tensor>& xs, const QuantSpec& spec,
                                 const CalibConfig& cfg, QuantParams& out) {
  const std::vector<float> grid = clip_grid(cfg);
  std::vector<std::pair<float, float>> cands;
  if (spec.symmetric) {
    for (float g : grid) cands.emplace_back(g, g);
  } else {
    for (float g : grid) {
      for (float b : grid) cands.emplace_back(g, b);
    }
  }
  std::vector<double> err(cands.size());
  parallel_for(static_cast<int64_t>(cands.size()), [&](int64_t i) {
    const auto [g, b] = cands[static_cast<size_t>(i)];
    double e = 0.0;
    for (const Tensor& x : xs) e += sse(dynamic_quantize_site(x, spec, g, b), x);
    err[static_cast<size_t>(i)] = e;
  });
  size_t best = 0;
  for (size_t i = 1; i < cands.size(); ++i) {
    if (err[i] <= err[best]) best = i;  // candidates ascend, ties prefer larger
  }
  int64_t count = 0;
  double before = 0.0;
  for (const Tensor& x : xs) {
    before += sse(dynamic_quantize_site(x, spec, 1.0f, 1.0f), x);
    count += x.size();
  }
  SiteCalibration r;
  r.gamma = cands[best].first;
  r.beta = cands[best].second;
  r.err_before = before / static_cast<double>(count);
  r.err_after = err[best] / static_cast<double>(count);
  out = QuantParams{};
  out.gamma = r.gamma;
  out.beta = r.beta;
  return r;
}

/// Static activation sites: per-group geometric scale grid crossed with
/// every integer zero point, fitted on the pooled calibration tokens.
SiteCalibration fit_static_site(const std::vector<Tensor>& xs, const QuantSpec& spec,
                                const CalibConfig& cfg, QuantParams& out) {
  if (spec.gran != Granularity::PerTensor && spec.gran != Granularity::PerHead) {
    throw Error("static mode needs a token-count-independent grouping, got " +
                std::string(granularity_name(spec.gran)));
  }
  const Tensor pooled = concat_axis0(xs);
  const int64_t ng = quant_group_count(spec, pooled.shape());
  std::vector<std::vector<float>> groups(static_cast<size_t>(ng));
  for (int64_t i = 0; i < pooled.size(); ++i) {
    groups[static_cast<size_t>(quant_group_of(spec, pooled.shape(), i))].push_back(pooled[i]);
  }
  const QuantParams range_fit = fit_params(pooled, spec, 1.0f, 1.0f);
  const int qmax = spec.qmax();
  const int points = cfg.static_scale_points;

  out = QuantParams{};
  out.scale = Tensor({static_cast<int>(ng)});
  out.zero = Tensor({static_cast<int>(ng)});
  SiteCalibration r;
  r.is_static = true;

  auto group_sse = [&](const std::vector<float>& vals, double s, double z) {
    double e = 0.0;
    for (float v : vals) {
      double q = std::nearbyint(v / s) + z;
      q = std::min<double>(qmax, std::max(0.0, q));
      const double d = s * (q - z) - v;
      e += d * d;
    }
    return e;
  };

  for (int64_t g = 0; g < ng; ++g) {
    const auto& vals = groups[static_cast<size_t>(g)];
    const double s_range = range_fit.scale[g];
    r.err_before += group_sse(vals, s_range, range_fit.zero[g]);

    std::vector<double> svals(static_cast<size_t>(points));
    for (int j = 0; j < points; ++j) {
      const double frac = points == 1 ? 1.0 : static_cast<double>(j) / (points - 1);
      svals[static_cast<size_t>(j)] = s_range * std::pow(cfg.static_scale_span, frac - 1.0);
    }
    const int64_t n_cand = static_cast<int64_t>(points) * (qmax + 1);
    std::vector<double> err(static_cast<size_t>(n_cand));
    parallel_for(n_cand, [&](int64_t i) {
      const double s = svals[static_cast<size_t>(i / (qmax + 1))];
      const double z = static_cast<double>(i % (qmax + 1));
      err[static_cast<size_t>(i)] = group_sse(vals, s, z);
    });
    int64_t best = 0;
    for (int64_t i = 1; i < n_cand; ++i) {
      if (err[static_cast<size_t>(i)] <= err[static_cast<size_t>(best)]) best = i;
    }
    out.scale[g] = static_cast<float>(svals[static_cast<size_t>(best / (qmax + 1))]);
    out.zero[g] = static_cast<float>(best % (qmax + 1));
    r.err_after += err[static_cast<size_t>(best)];
  }
  r.err_before /= static_cast<double>(pooled.size());
  r.err_after /= static_cast<double>(pooled.size());
  return r;
}

}  // namespace

CalibrationReport calibrate_hooks(const ToyModel& model, QuantHookSet& hooks,
                                  const std::vector<std::vector<int>>& sequences,
                                  const PrefixCache* prefix, const CalibConfig& cfg) {
  cfg.validate();
  hooks.validate();
  if (sequences.empty()) throw Error("calibration needs at least one sequence");
  if (prefix && prefix->fingerprint != model.fingerprint()) {
    throw Error("prefix cache fingerprint does not match model");
  }

  CalibrationReport report;
  report.config = cfg;

  std::vector<Tensor> xs;
  for (const auto& seq : sequences) {
    Tensor x({static_cast<int>(seq.size()), model.config.hidden});
    for (size_t i = 0; i < seq.size(); ++i) {
      const int id = seq[i];
      if (id < 0 || id >= model.config.vocab) {
        throw Error("token id " + std::to_string(id) + " out of vocab");
      }
      std::copy(&model.embedding(id, 0), &model.embedding(id, 0) + model.config.hidden,
                &x(static_cast<int>(i), 0));
    }
    xs.push_back(std::move(x));
  }

  // Sites within a block grouped by what they depend on; each stage is
  // re-captured after the previous stage's parameters are in place.
  static const std::vector<std::vector<std::string>> stages = {
      {"weight:q_proj", "weight:k_proj", "weight:v_proj", "input:q_proj", "input:k_proj",
       "input:v_proj"},
      {"Q", "K", "V"},
      {"weight:o_proj", "input:o_proj"},
      {"weight:gate_proj", "weight:up_proj", "input:gate_proj", "input:up_proj"},
      {"weight:down_proj", "input:down_proj"},
  };

  const int pos0 = prefix ? prefix->length() : 0;
  for (int l = 0; l < model.config.n_layers; ++l) {
    for (const auto& stage : stages) {
      bool any = false;
      for (const auto& site : stage) any = any || hooks.sites.count(site) > 0;
      if (!any) continue;
      LayerCapture cap = capture_layer(model, l, xs, prefix, hooks);
      for (const auto& site : stage) {
        auto it = hooks.sites.find(site);
        if (it == hooks.sites.end()) continue;
        const QuantSpec& spec = it->second;
        QuantParams params;
        SiteCalibration sc;
        if (site.rfind("weight:", 0) == 0) {
          const std::string lin = site.substr(7);
          std::vector<Tensor> ins;
          for (const auto& li : cap.linear_inputs) ins.push_back(li.at(lin));
          sc = fit_weight_site(weight_of(model.layers[static_cast<size_t>(l)], lin), spec,
                               concat_axis0(ins), cfg, params);
        } else {
          std::vector<Tensor> site_xs;
          if (site == "Q") {
            site_xs = cap.q;
          } else if (site == "K") {
            site_xs = cap.k;
          } else if (site == "V") {
            site_xs = cap.v;
          } else {
            const std::string lin = site.substr(6);
            for (const auto& li : cap.linear_inputs) site_xs.push_back(li.at(lin));
          }
          sc = spec.mode == QuantMode::Static ? fit_static_site(site_xs, spec, cfg, params)
                                              : fit_dynamic_site(site_xs, spec, cfg, params);
        }
        sc.layer = l;
        sc.site = site;
        hooks.set_params(l, site, std::move(params));
        report.total_err_before += sc.err_before;
        report.total_err_after += sc.err_after;
        report.sites.push_back(std::move(sc));
      }
    }
    // advance the running activations through the now-calibrated block
    for (auto& x : xs) {
      BlockKv kv;
      if (prefix && prefix->length() > 0) {
        kv.prefix_k = &prefix->keys[static_cast<size_t>(l)];
        kv.prefix_v = &prefix->values[static_cast<size_t>(l)];
      }
      x = block_forward(model, l, x, pos0, &hooks, &kv, nullptr);
    }
  }
  return report;
}

std::string calibration_report_json(const CalibrationReport& report) {
  json j;
  j["grid"] = json{{"lo", report.config.grid_lo},
                   {"hi", report.config.grid_hi},
                   {"step", report.config.grid_step},
                   {"static_scale_points", report.config.static_scale_points},
                   {"static_scale_span", report.config.static_scale_span}};
  json sites = json::array();
  for (const auto& s : report.sites) {
    sites.push_back(json{{"layer", s.layer},
                         {"site", s.site},
                         {"static", s.is_static},
                         {"gamma", s.gamma},
                         {"beta", s.beta},
                         {"err_before", s.err_before},
                         {"err_after", s.err_after}});
  }
  j["sites"] = std::move(sites);
  j["total_err_before"] = report.total_err_before;
  j["total_err_after"] = report.total_err_after;
  return j.dump(2);
}

}  // namespace pq
