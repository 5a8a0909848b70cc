#include "pq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "pq/rotation.hpp"

namespace pq {

using json = nlohmann::ordered_json;

Scheme scheme_from_name(const std::string& name) {
  if (name == "O1") return Scheme::O1;
  if (name == "O2") return Scheme::O2;
  if (name == "W4") return Scheme::W4;
  if (name == "W3") return Scheme::W3;
  if (name == "W2") return Scheme::W2;
  throw Error("unknown scheme: " + name + " (expected O1, O2, W4, W3 or W2)");
}

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::O1: return "O1";
    case Scheme::O2: return "O2";
    case Scheme::W4: return "W4";
    case Scheme::W3: return "W3";
    case Scheme::W2: return "W2";
  }
  return "?";
}

QuantHookSet make_hooks(Scheme scheme, const ModelConfig& config, int bits_w, int bits_a,
                        int bits_kv) {
  QuantHookSet hooks;
  static const char* kLinears[] = {"q_proj", "k_proj",  "v_proj",   "o_proj",
                                   "gate_proj", "up_proj", "down_proj"};
  auto weight_sites = [&](QuantSpec spec) {
    for (const char* lin : kLinears) hooks.sites[std::string("weight:") + lin] = spec;
  };
  auto input_sites = [&](QuantSpec spec) {
    for (const char* lin : kLinears) hooks.sites[std::string("input:") + lin] = spec;
  };

  switch (scheme) {
    case Scheme::O1: {
      weight_sites({bits_w, Granularity::PerChannel, QuantMode::Dynamic, false, 0});
      input_sites({bits_a, Granularity::PerToken, QuantMode::Dynamic, false, 0});
      hooks.sites["Q"] = {bits_a, Granularity::PerToken, QuantMode::Dynamic, false, 0};
      const int g = std::min(128, config.head_dim);
      hooks.sites["K"] = {bits_kv, Granularity::Group, QuantMode::Dynamic, false, g};
      hooks.sites["V"] = {bits_kv, Granularity::Group, QuantMode::Dynamic, false, g};
      break;
    }
    case Scheme::O2: {
      weight_sites({bits_w, Granularity::PerChannel, QuantMode::Static, false, 0});
      input_sites({bits_a, Granularity::PerTensor, QuantMode::Static, false, 0});
      hooks.sites["Q"] = {bits_a, Granularity::PerTensor, QuantMode::Static, false, 0};
      hooks.sites["K"] = {bits_kv, Granularity::PerHead, QuantMode::Static, false, 0};
      hooks.sites["V"] = {bits_kv, Granularity::PerHead, QuantMode::Static, false, 0};
      break;
    }
    case Scheme::W4:
    case Scheme::W3:
    case Scheme::W2: {
      const int bits = scheme == Scheme::W4 ? 4 : scheme == Scheme::W3 ? 3 : 2;
      const int g = std::min(128, config.hidden);
      weight_sites({bits, Granularity::Group, QuantMode::Dynamic, false, g});
      break;
    }
  }
  hooks.validate();
  return hooks;
}

static uint64_t fnv_mix(uint64_t h, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t PipelineConfig::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv_mix(h, static_cast<uint64_t>(scheme));
  h = fnv_mix(h, static_cast<uint64_t>(bits_w) | (static_cast<uint64_t>(bits_a) << 8) |
                     (static_cast<uint64_t>(bits_kv) << 16));
  h = fnv_mix(h, (rotate ? 1 : 0) | (use_prefix ? 2 : 0) | (prefix_reversed ? 4 : 0));
  h = fnv_mix(h, seed);
  h = fnv_mix(h, static_cast<uint64_t>(context_len));
  h = fnv_mix(h, static_cast<uint64_t>(thresholds.eta1 * 1000));
  h = fnv_mix(h, static_cast<uint64_t>(thresholds.eta2 * 1000));
  h = fnv_mix(h, static_cast<uint64_t>(calib.grid_lo * 1000));
  h = fnv_mix(h, static_cast<uint64_t>(calib.grid_hi * 1000));
  h = fnv_mix(h, static_cast<uint64_t>(calib.grid_step * 100000));
  h = fnv_mix(h, static_cast<uint64_t>(calib.static_scale_points));
  h = fnv_mix(h, static_cast<uint64_t>(train.epochs));
  h = fnv_mix(h, static_cast<uint64_t>(train.batch_size));
  return h;
}

std::vector<double> block_output_mses(const ToyModel& model, const QuantHookSet& hooks,
                                      const std::vector<std::vector<int>>& sequences,
                                      const PrefixCache* prefix) {
  const auto nl = static_cast<size_t>(model.config.n_layers);
  std::vector<double> out(nl, 0.0);
  for (const auto& seq : sequences) {
    ActivationCapture ref_cap, q_cap;
    ref_cap.want_block_output = q_cap.want_block_output = true;
    ForwardOptions ref_opts, q_opts;
    ref_opts.capture = &ref_cap;
    ref_opts.prefix = prefix;
    q_opts.capture = &q_cap;
    q_opts.prefix = prefix;
    q_opts.hooks = &hooks;
    forward(model, seq, ref_opts);
    forward(model, seq, q_opts);
    for (size_t l = 0; l < nl; ++l) out[l] += mse(ref_cap.block_output[l], q_cap.block_output[l]);
  }
  for (auto& v : out) v /= static_cast<double>(sequences.size());
  return out;
}

PipelineResult run_pipeline(ToyModel& model, const std::vector<std::vector<int>>& corpus,
                            const PipelineConfig& cfg) {
  if (corpus.empty()) throw Error("pipeline needs a non-empty corpus");
  cfg.thresholds.validate();
  PipelineResult result;
  result.config = cfg;

  if (cfg.rotate) model = apply_rotations(model, cfg.seed, true, true, true, true);

  result.outliers = analyze_outliers(model, corpus, cfg.thresholds);
  const int o = std::max(1, result.outliers.outlier_token_count);
  result.plan = select_prefix(result.outliers, o);
  if (cfg.prefix_reversed && result.plan.o > 2) {
    std::reverse(result.plan.token_ids.begin(), result.plan.token_ids.end() - 1);
  }

  PrefixCache cache;
  const PrefixCache* pc = nullptr;
  if (cfg.use_prefix) {
    cache = build_prefix_cache(model, result.plan);
    pc = &cache;
    result.isolation = verify_isolation(model, result.plan, corpus, cfg.thresholds);
  }

  QuantHookSet hooks = make_hooks(cfg.scheme, model.config, cfg.bits_w, cfg.bits_a, cfg.bits_kv);
  result.block_mse_init = block_output_mses(model, hooks, corpus, pc);
  result.calibration = calibrate_hooks(model, hooks, corpus, pc, cfg.calib);
  result.block_mse_calibrated = block_output_mses(model, hooks, corpus, pc);
  if (cfg.train.epochs > 0) {
    result.finetune = finetune_blocks(model, hooks, corpus, pc, cfg.train);
  }
  // the prefix is refilled in full precision from the trained weights
  if (cfg.use_prefix) {
    cache = build_prefix_cache(model, result.plan);
    pc = &cache;
  }
  result.block_mse_finetuned = block_output_mses(model, hooks, corpus, pc);

  std::vector<int> flat;
  for (const auto& seq : corpus) flat.insert(flat.end(), seq.begin(), seq.end());
  int ctx = std::min(cfg.context_len, model.config.max_seq - result.plan.o);
  ctx = std::min<int>(ctx, static_cast<int>(flat.size()) - 1);
  if (ctx < 1) throw Error("corpus too small for perplexity evaluation");
  result.ppl_fp32 = perplexity(model, flat, nullptr, pc, ctx);
  result.ppl_quant = perplexity(model, flat, &hooks, pc, ctx);
  result.hooks = std::move(hooks);
  return result;
}

std::string pipeline_report_json(const PipelineResult& r) {
  json j;
  j["seed"] = r.config.seed;
  j["config_hash"] = r.config.hash();
  j["scheme"] = scheme_name(r.config.scheme);
  j["bits"] = json{{"w", r.config.bits_w}, {"a", r.config.bits_a}, {"kv", r.config.bits_kv}};
  j["rotate"] = r.config.rotate;
  j["use_prefix"] = r.config.use_prefix;
  j["outliers"] = json{{"o", r.outliers.outlier_token_count},
                       {"block_mean_upper_count", r.outliers.block_mean_upper_count}};
  json tally = json::object();
  for (const auto& [tok, n] : r.outliers.token_frequency) tally[std::to_string(tok)] = n;
  j["outliers"]["token_frequency"] = std::move(tally);
  j["prefix"] = json{{"tokens", r.plan.token_ids}, {"o", r.plan.o}};
  if (r.config.use_prefix) {
    j["isolation"] = json{{"residual_upper_count", r.isolation.residual_upper_count},
                          {"max_ratio_without", r.isolation.max_ratio_without},
                          {"max_ratio_with", r.isolation.max_ratio_with}};
  }
  j["calibration"] = json{{"total_err_before", r.calibration.total_err_before},
                          {"total_err_after", r.calibration.total_err_after},
                          {"sites", r.calibration.sites.size()}};
  json ft = json::array();
  for (const auto& b : r.finetune.blocks) {
    ft.push_back(json{{"layer", b.layer},
                      {"loss_before", b.loss_before},
                      {"loss_after", b.loss_after},
                      {"diverged", b.diverged}});
  }
  j["finetune"] = std::move(ft);
  j["block_mse"] = json{{"init", r.block_mse_init},
                        {"calibrated", r.block_mse_calibrated},
                        {"finetuned", r.block_mse_finetuned}};
  j["perplexity"] = json{{"fp32", r.ppl_fp32}, {"quant", r.ppl_quant}};
  return j.dump(2);
}

// ---- error decomposition -------------------------------------------------

namespace {

ErrorTable::Row decompose_variant(const std::string& name, const ToyModel& model,
                                  const std::vector<std::vector<int>>& seqs,
                                  const OutlierThresholds& th, const QuantHookSet& hooks,
                                  const PrefixCache* prefix, int block) {
  ErrorTable::Row row;
  row.variant = name;
  double total = 0.0, outlier_err = 0.0;
  int64_t count = 0;
  for (const auto& seq : seqs) {
    ActivationCapture ref_cap, q_cap;
    ref_cap.want_block_output = q_cap.want_block_output = true;
    ForwardOptions ref_opts, q_opts;
    ref_opts.capture = &ref_cap;
    ref_opts.prefix = prefix;
    q_opts.capture = &q_cap;
    q_opts.prefix = prefix;
    q_opts.hooks = &hooks;
    forward(model, seq, ref_opts);
    forward(model, seq, q_opts);
    const Tensor& ref = ref_cap.block_output[static_cast<size_t>(block)];
    const Tensor& qt = q_cap.block_output[static_cast<size_t>(block)];
    const OutlierClassification cls = classify_outliers(token_maxima(ref), th);
    const int t = ref.dim(0), c = ref.dim(1);
    for (int i = 0; i < t; ++i) {
      double e = 0.0;
      for (int jj = 0; jj < c; ++jj) {
        const double d = static_cast<double>(ref(i, jj)) - qt(i, jj);
        e += d * d;
      }
      total += e;
      if (cls.upper.count(i)) outlier_err += e;
    }
    row.outlier_positions += static_cast<int>(cls.upper.size());
    count += ref.size();
  }
  row.total_mse = total / static_cast<double>(count);
  if (total > 0.0) {
    row.outlier_share = 100.0 * outlier_err / total;
    row.remaining_share = 100.0 - row.outlier_share;
  } else {
    row.outlier_share = 0.0;
    row.remaining_share = 100.0;
  }
  return row;
}

}  // namespace

ErrorTable error_decomposition(const ToyModel& model, const std::vector<std::vector<int>>& seqs,
                               const OutlierThresholds& th, int bits, int block_index,
                               uint64_t rotation_seed) {
  th.validate();
  if (model.rotation.any()) throw Error("error decomposition starts from an unrotated model");
  if (block_index < 0 || block_index >= model.config.n_layers) {
    throw Error("measurement block " + std::to_string(block_index) + " out of range");
  }
  QuantHookSet hooks;
  for (const char* lin :
       {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"}) {
    hooks.sites[std::string("input:") + lin] = {bits, Granularity::PerToken, QuantMode::Dynamic,
                                                false, 0};
  }

  ErrorTable table;
  table.block = block_index;
  table.rows.push_back(decompose_variant("none", model, seqs, th, hooks, nullptr, block_index));

  const ToyModel rotated = apply_rotations(model, rotation_seed, true, true, true, true);
  table.rows.push_back(
      decompose_variant("rotation", rotated, seqs, th, hooks, nullptr, block_index));

  const OutlierReport report = analyze_outliers(rotated, seqs, th);
  const PrefixPlan plan = select_prefix(report, std::max(1, report.outlier_token_count));
  const PrefixCache cache = build_prefix_cache(rotated, plan);
  table.rows.push_back(
      decompose_variant("rotation_prefix", rotated, seqs, th, hooks, &cache, block_index));
  return table;
}

std::string error_table_json(const ErrorTable& table) {
  json j;
  j["block"] = table.block;
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back(json{{"variant", r.variant},
                        {"total_mse", r.total_mse},
                        {"outlier_share", r.outlier_share},
                        {"remaining_share", r.remaining_share},
                        {"outlier_positions", r.outlier_positions}});
  }
  j["rows"] = std::move(rows);
  return j.dump(2);
}

std::string error_table_csv(const ErrorTable& table) {
  std::string out = "variant,total_mse,outlier_share,remaining_share,outlier_positions\n";
  char buf[256];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%d\n", r.variant.c_str(), r.total_mse,
                  r.outlier_share, r.remaining_share, r.outlier_positions);
    out += buf;
  }
  return out;
}

}  // namespace pq
