// Command-line front end: model/corpus generation, the individual pipeline
// stages, and the chained end-to-end pipeline. Exit codes: 0 success,
// 1 module error (diagnostic on stderr), 2 bad usage.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pq/harness.hpp"

using json = nlohmann::ordered_json;

namespace {

std::vector<std::vector<int>> load_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw pq::Error("cannot open corpus file: " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw pq::Error("bad corpus JSON in " + path + ": " + e.what());
  }
  if (!j.contains("sequences") || !j["sequences"].is_array()) {
    throw pq::Error("corpus file " + path + " has no \"sequences\" array");
  }
  auto seqs = j["sequences"].get<std::vector<std::vector<int>>>();
  if (seqs.empty()) throw pq::Error("corpus file " + path + " is empty");
  return seqs;
}

void save_corpus(const std::vector<std::vector<int>>& seqs, const std::string& path) {
  json j;
  j["sequences"] = seqs;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw pq::Error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw pq::Error("write failed for " + path);
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw pq::Error("cannot open " + path + " for writing");
  f << text;
  if (!text.empty() && text.back() != '\n') f << "\n";
  if (!f) throw pq::Error("write failed for " + path);
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    write_text(text, out_path);
  }
}

struct Bits {
  int w = 4, a = 4, kv = 4;
};

Bits parse_bits(const std::string& s) {
  Bits b;
  if (std::sscanf(s.c_str(), "%d,%d,%d", &b.w, &b.a, &b.kv) != 3) {
    throw CLI::ValidationError("--bits", "expected W,A,KV (e.g. 4,4,4), got '" + s + "'");
  }
  return b;
}

std::vector<int> parse_triggers(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw CLI::ValidationError("--triggers", "expected comma-separated byte values, got '" + s +
                                                   "'");
    }
  }
  if (out.empty()) throw CLI::ValidationError("--triggers", "needs at least one token");
  return out;
}

json site_stats_json(const std::vector<pq::SiteStats>& stats) {
  json arr = json::array();
  for (const auto& s : stats) {
    arr.push_back(json{{"max_top1_over_median", s.max_top1_over_median},
                       {"max_median_over_min1", s.max_median_over_min1}});
  }
  return arr;
}

std::string outlier_report_json(const pq::OutlierReport& r) {
  json j;
  j["eta1"] = r.thresholds.eta1;
  j["eta2"] = r.thresholds.eta2;
  j["block_mean_upper_count"] = r.block_mean_upper_count;
  j["outlier_token_count"] = r.outlier_token_count;
  json tally = json::object();
  for (const auto& [tok, n] : r.token_frequency) tally[std::to_string(tok)] = n;
  j["token_frequency"] = std::move(tally);
  j["sites"] = json{{"block_output", site_stats_json(r.block_output)},
                    {"down_proj_input", site_stats_json(r.down_proj_input)},
                    {"Q", site_stats_json(r.q_site)},
                    {"K", site_stats_json(r.k_site)}};
  return j.dump(2);
}

std::string maxima_csv(const pq::OutlierReport& r) {
  std::string out = "layer,sequence,position,max_abs\n";
  char buf[128];
  for (size_t l = 0; l < r.block_output.size(); ++l) {
    const auto& stats = r.block_output[l];
    for (size_t s = 0; s < stats.maxima.size(); ++s) {
      const pq::Tensor& m = stats.maxima[s];
      for (int64_t i = 0; i < m.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%zu,%lld,%.9g\n", l, s,
                      static_cast<long long>(i), static_cast<double>(m[i]));
        out += buf;
      }
    }
  }
  return out;
}

std::string plan_json(const pq::PrefixPlan& plan) {
  json j;
  j["token_ids"] = plan.token_ids;
  j["o"] = plan.o;
  return j.dump(2);
}

pq::PrefixPlan reorder_plan(pq::PrefixPlan plan, const std::string& order) {
  if (order == "reversed" && plan.o > 2) {
    std::reverse(plan.token_ids.begin(), plan.token_ids.end() - 1);
  }
  return plan;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefix-aware quantization laboratory for a toy byte-level transformer"};
  app.require_subcommand(1);

  // ---- gen-model ----
  auto* gen_model = app.add_subcommand("gen-model", "generate a random toy model");
  struct {
    std::string out;
    uint64_t seed = 0;
    bool planted = false;
    int layers = 4, hidden = 256, heads = 4, intermediate = 512, max_seq = 512;
    std::string triggers = "46,10";
  } gm;
  gen_model->add_option("--out", gm.out, "output model file")->required();
  gen_model->add_option("--seed", gm.seed, "rng seed");
  gen_model->add_flag("--planted", gm.planted, "plant the outlier-trigger construction");
  gen_model->add_option("--layers", gm.layers, "transformer blocks");
  gen_model->add_option("--hidden", gm.hidden, "hidden width");
  gen_model->add_option("--heads", gm.heads, "attention heads");
  gen_model->add_option("--intermediate", gm.intermediate, "MLP width");
  gen_model->add_option("--max-seq", gm.max_seq, "maximum sequence length");
  gen_model->add_option("--triggers", gm.triggers, "planted trigger bytes, comma-separated");
  gen_model->callback([&] {
    pq::ModelConfig cfg;
    cfg.n_layers = gm.layers;
    cfg.hidden = gm.hidden;
    cfg.n_heads = gm.heads;
    if (gm.heads < 1 || gm.hidden % gm.heads != 0) {
      throw pq::Error("hidden must be a positive multiple of heads");
    }
    cfg.head_dim = gm.hidden / gm.heads;
    cfg.intermediate = gm.intermediate;
    cfg.max_seq = gm.max_seq;
    pq::Rng rng(gm.seed);
    pq::ToyModel model = pq::init_random_model(cfg, rng);
    if (gm.planted) {
      pq::PlantedConfig pc;
      pc.trigger_tokens = parse_triggers(gm.triggers);
      model = pq::plant_outlier_trigger(model, pc);
    }
    pq::save_model(model, gm.out);
  });

  // ---- gen-corpus ----
  auto* gen_corpus = app.add_subcommand("gen-corpus", "generate a seeded byte corpus");
  struct {
    std::string out;
    uint64_t seed = 0;
    int sequences = 16, seq_len = 64;
    std::string triggers = "46,10";
  } gc;
  gen_corpus->add_option("--out", gc.out, "output corpus file")->required();
  gen_corpus->add_option("--seed", gc.seed, "rng seed");
  gen_corpus->add_option("--sequences", gc.sequences, "number of sequences");
  gen_corpus->add_option("--seq-len", gc.seq_len, "tokens per sequence");
  gen_corpus->add_option("--triggers", gc.triggers, "trigger bytes injected into the text");
  gen_corpus->callback([&] {
    pq::Rng rng(gc.seed);
    save_corpus(pq::make_trigger_corpus(rng, gc.sequences, gc.seq_len, parse_triggers(gc.triggers)),
                gc.out);
  });

  // ---- analyze ----
  auto* analyze = app.add_subcommand("analyze", "token-wise outlier statistics");
  struct {
    std::string model, corpus, out, csv;
    float eta1 = 64.0f, eta2 = 8.0f;
  } an;
  analyze->add_option("--model", an.model, "model file")->required();
  analyze->add_option("--corpus", an.corpus, "corpus file")->required();
  analyze->add_option("--eta1", an.eta1, "upper outlier threshold");
  analyze->add_option("--eta2", an.eta2, "lower outlier threshold");
  analyze->add_option("--out", an.out, "report JSON path (default stdout)");
  analyze->add_option("--csv", an.csv, "also write token maxima as CSV");
  analyze->callback([&] {
    const pq::ToyModel model = pq::load_model(an.model);
    const auto corpus = load_corpus(an.corpus);
    const pq::OutlierReport report = pq::analyze_outliers(model, corpus, {an.eta1, an.eta2});
    emit(outlier_report_json(report), an.out);
    if (!an.csv.empty()) write_text(maxima_csv(report), an.csv);
  });

  // ---- find-prefix ----
  auto* find_prefix = app.add_subcommand("find-prefix", "select prefix tokens and build the cache");
  struct {
    std::string model, corpus, out;
    float eta1 = 64.0f, eta2 = 8.0f;
    std::string order = "listed";
  } fp;
  find_prefix->add_option("--model", fp.model, "model file")->required();
  find_prefix->add_option("--corpus", fp.corpus, "corpus file")->required();
  find_prefix->add_option("--eta1", fp.eta1, "upper outlier threshold");
  find_prefix->add_option("--eta2", fp.eta2, "lower outlier threshold");
  find_prefix->add_option("--out", fp.out, "prefix cache output file");
  find_prefix->add_option("--prefix-order", fp.order, "token order before BOS")
      ->check(CLI::IsMember({"listed", "reversed"}));
  find_prefix->callback([&] {
    const pq::ToyModel model = pq::load_model(fp.model);
    const auto corpus = load_corpus(fp.corpus);
    const pq::OutlierReport report = pq::analyze_outliers(model, corpus, {fp.eta1, fp.eta2});
    pq::PrefixPlan plan =
        reorder_plan(pq::select_prefix(report, std::max(1, report.outlier_token_count)), fp.order);
    std::cout << plan_json(plan) << "\n";
    if (!fp.out.empty()) pq::save_prefix_cache(pq::build_prefix_cache(model, plan), fp.out);
  });

  // ---- rotate ----
  auto* rotate = app.add_subcommand("rotate", "absorb/activate the Hadamard rotations");
  struct {
    std::string model, out;
    uint64_t seed = 0;
    bool r1 = true, r2 = true, r3 = true, r4 = true;
  } ro;
  rotate->add_option("--model", ro.model, "model file")->required();
  rotate->add_option("--out", ro.out, "rotated model output")->required();
  rotate->add_option("--seed", ro.seed, "sign-diagonal seed");
  rotate->add_option("--r1", ro.r1, "residual-stream rotation");
  rotate->add_option("--r2", ro.r2, "head-wise value rotation");
  rotate->add_option("--r3", ro.r3, "online Q/K rotation");
  rotate->add_option("--r4", ro.r4, "online MLP-activation rotation");
  rotate->callback([&] {
    pq::ToyModel model = pq::load_model(ro.model);
    model = pq::apply_rotations(model, ro.seed, ro.r1, ro.r2, ro.r3, ro.r4);
    pq::save_model(model, ro.out);
  });

  // ---- calibrate ----
  auto* calibrate = app.add_subcommand("calibrate", "grid-search quantizer calibration");
  struct {
    std::string model, corpus, prefix, out, report;
    std::string scheme = "O1";
    std::string bits = "4,4,4";
    pq::CalibConfig calib;
  } ca;
  calibrate->add_option("--model", ca.model, "model file")->required();
  calibrate->add_option("--corpus", ca.corpus, "calibration corpus")->required();
  calibrate->add_option("--prefix", ca.prefix, "prefix cache file");
  calibrate->add_option("--scheme", ca.scheme, "O1, O2, W4, W3 or W2");
  calibrate->add_option("--bits", ca.bits, "W,A,KV bit widths");
  calibrate->add_option("--out", ca.out, "calibrated model output")->required();
  calibrate->add_option("--report", ca.report, "calibration report JSON path (default stdout)");
  calibrate->add_option("--grid-lo", ca.calib.grid_lo, "clipping grid lower bound");
  calibrate->add_option("--grid-hi", ca.calib.grid_hi, "clipping grid upper bound");
  calibrate->add_option("--grid-step", ca.calib.grid_step, "clipping grid step");
  calibrate->add_option("--grid-static-points", ca.calib.static_scale_points,
                        "static scale grid size");
  calibrate->add_option("--grid-static-span", ca.calib.static_scale_span,
                        "static scale grid span");
  calibrate->callback([&] {
    const pq::ToyModel model = pq::load_model(ca.model);
    const auto corpus = load_corpus(ca.corpus);
    const Bits b = parse_bits(ca.bits);
    pq::QuantHookSet hooks =
        pq::make_hooks(pq::scheme_from_name(ca.scheme), model.config, b.w, b.a, b.kv);
    pq::PrefixCache cache;
    const pq::PrefixCache* pc = nullptr;
    if (!ca.prefix.empty()) {
      cache = pq::load_prefix_cache(ca.prefix);
      pc = &cache;
    }
    const pq::CalibrationReport rep = pq::calibrate_hooks(model, hooks, corpus, pc, ca.calib);
    pq::save_model(model, ca.out, &hooks);
    emit(pq::calibration_report_json(rep), ca.report);
  });

  // ---- finetune ----
  auto* finetune = app.add_subcommand("finetune", "block-wise quantization fine-tuning");
  struct {
    std::string model, corpus, prefix, out, report;
    pq::TrainConfig train;
    bool no_weights = false, no_qparams = false;
  } ft;
  finetune->add_option("--model", ft.model, "calibrated model file (with quantizer state)")
      ->required();
  finetune->add_option("--corpus", ft.corpus, "training corpus")->required();
  finetune->add_option("--prefix", ft.prefix, "prefix cache file");
  finetune->add_option("--out", ft.out, "fine-tuned model output")->required();
  finetune->add_option("--report", ft.report, "training report JSON path (default stdout)");
  finetune->add_option("--epochs", ft.train.epochs, "training epochs per block");
  finetune->add_option("--batch", ft.train.batch_size, "sequences per batch");
  finetune->add_option("--lr-qparams", ft.train.lr_qparams, "quantizer learning rate");
  finetune->add_option("--lr-weights", ft.train.lr_weights, "weight learning rate");
  finetune->add_option("--seed", ft.train.seed, "batch shuffling seed");
  finetune->add_flag("--no-weights", ft.no_weights, "freeze the weights");
  finetune->add_flag("--no-qparams", ft.no_qparams, "freeze the quantizer parameters");
  finetune->callback([&] {
    pq::QuantHookSet hooks;
    pq::ToyModel model = pq::load_model(ft.model, &hooks);
    if (hooks.empty()) {
      throw pq::Error("model file " + ft.model + " carries no quantizer state; run calibrate");
    }
    const auto corpus = load_corpus(ft.corpus);
    pq::PrefixCache cache;
    const pq::PrefixCache* pc = nullptr;
    if (!ft.prefix.empty()) {
      cache = pq::load_prefix_cache(ft.prefix);
      pc = &cache;
    }
    ft.train.train_weights = !ft.no_weights;
    ft.train.train_qparams = !ft.no_qparams;
    const pq::FinetuneReport rep = pq::finetune_blocks(model, hooks, corpus, pc, ft.train);
    pq::save_model(model, ft.out, &hooks);
    emit(pq::finetune_report_json(rep), ft.report);
  });

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "perplexity and block-error evaluation");
  struct {
    std::string model, corpus, prefix, out;
    int context = 64;
  } ev;
  eval->add_option("--model", ev.model, "model file")->required();
  eval->add_option("--corpus", ev.corpus, "evaluation corpus")->required();
  eval->add_option("--prefix", ev.prefix, "prefix cache file");
  eval->add_option("--context", ev.context, "perplexity window length");
  eval->add_option("--out", ev.out, "report JSON path (default stdout)");
  eval->callback([&] {
    pq::QuantHookSet hooks;
    const pq::ToyModel model = pq::load_model(ev.model, &hooks);
    const auto corpus = load_corpus(ev.corpus);
    pq::PrefixCache cache;
    const pq::PrefixCache* pc = nullptr;
    if (!ev.prefix.empty()) {
      cache = pq::load_prefix_cache(ev.prefix);
      pc = &cache;
    }
    std::vector<int> flat;
    for (const auto& seq : corpus) flat.insert(flat.end(), seq.begin(), seq.end());
    int ctx = std::min(ev.context, model.config.max_seq - (pc ? pc->length() : 0));
    ctx = std::min<int>(ctx, static_cast<int>(flat.size()) - 1);
    if (ctx < 1) throw pq::Error("corpus too small for the requested context length");
    json j;
    j["context_len"] = ctx;
    j["ppl_fp32"] = pq::perplexity(model, flat, nullptr, pc, ctx);
    if (!hooks.empty()) {
      j["ppl_quant"] = pq::perplexity(model, flat, &hooks, pc, ctx);
      j["block_mse"] = pq::block_output_mses(model, hooks, corpus, pc);
    }
    emit(j.dump(2), ev.out);
  });

  // ---- error-table ----
  auto* error_table = app.add_subcommand("error-table",
                                         "per-token error decomposition at one block");
  struct {
    std::string model, corpus, out, csv;
    float eta1 = 64.0f, eta2 = 8.0f;
    int bits = 4, block = 1;
    uint64_t seed = 0;
  } et;
  error_table->add_option("--model", et.model, "unrotated model file")->required();
  error_table->add_option("--corpus", et.corpus, "corpus file")->required();
  error_table->add_option("--eta1", et.eta1, "upper outlier threshold");
  error_table->add_option("--eta2", et.eta2, "lower outlier threshold");
  error_table->add_option("--bits", et.bits, "activation bit width");
  error_table->add_option("--block", et.block, "measurement block index");
  error_table->add_option("--seed", et.seed, "rotation seed");
  error_table->add_option("--out", et.out, "table JSON path (default stdout)");
  error_table->add_option("--csv", et.csv, "also write the table as CSV");
  error_table->callback([&] {
    const pq::ToyModel model = pq::load_model(et.model);
    const auto corpus = load_corpus(et.corpus);
    const pq::ErrorTable table =
        pq::error_decomposition(model, corpus, {et.eta1, et.eta2}, et.bits, et.block, et.seed);
    emit(pq::error_table_json(table), et.out);
    if (!et.csv.empty()) write_text(pq::error_table_csv(table), et.csv);
  });

  // ---- pipeline ----
  auto* pipeline = app.add_subcommand("pipeline", "rotate, analyze, prefix, calibrate, "
                                                  "finetune and evaluate in one run");
  struct {
    std::string model, corpus, out, model_out;
    std::string scheme = "O1";
    std::string bits = "4,4,4";
    std::string order = "listed";
    uint64_t seed = 0;
    float eta1 = 64.0f, eta2 = 8.0f;
    int context = 64;
    bool no_rotate = false, no_prefix = false;
    pq::CalibConfig calib;
    pq::TrainConfig train;
  } pl;
  pipeline->add_option("--model", pl.model, "model file")->required();
  pipeline->add_option("--corpus", pl.corpus, "corpus file")->required();
  pipeline->add_option("--scheme", pl.scheme, "O1, O2, W4, W3 or W2");
  pipeline->add_option("--bits", pl.bits, "W,A,KV bit widths");
  pipeline->add_option("--seed", pl.seed, "pipeline seed");
  pipeline->add_option("--eta1", pl.eta1, "upper outlier threshold");
  pipeline->add_option("--eta2", pl.eta2, "lower outlier threshold");
  pipeline->add_option("--context", pl.context, "perplexity window length");
  pipeline->add_option("--prefix-order", pl.order, "prefix token order before BOS")
      ->check(CLI::IsMember({"listed", "reversed"}));
  pipeline->add_flag("--no-rotate", pl.no_rotate, "skip the Hadamard rotations");
  pipeline->add_flag("--no-prefix", pl.no_prefix, "skip the prefixed KV cache");
  pipeline->add_option("--grid-lo", pl.calib.grid_lo, "clipping grid lower bound");
  pipeline->add_option("--grid-hi", pl.calib.grid_hi, "clipping grid upper bound");
  pipeline->add_option("--grid-step", pl.calib.grid_step, "clipping grid step");
  pipeline->add_option("--grid-static-points", pl.calib.static_scale_points,
                       "static scale grid size");
  pipeline->add_option("--grid-static-span", pl.calib.static_scale_span,
                       "static scale grid span");
  pipeline->add_option("--epochs", pl.train.epochs, "fine-tuning epochs per block");
  pipeline->add_option("--batch", pl.train.batch_size, "fine-tuning batch size");
  pipeline->add_option("--out", pl.out, "pipeline report JSON path (default stdout)");
  pipeline->add_option("--model-out", pl.model_out, "save the final quantized model");
  pipeline->callback([&] {
    pq::ToyModel model = pq::load_model(pl.model);
    const auto corpus = load_corpus(pl.corpus);
    const Bits b = parse_bits(pl.bits);
    pq::PipelineConfig cfg;
    cfg.scheme = pq::scheme_from_name(pl.scheme);
    cfg.bits_w = b.w;
    cfg.bits_a = b.a;
    cfg.bits_kv = b.kv;
    cfg.rotate = !pl.no_rotate;
    cfg.use_prefix = !pl.no_prefix;
    cfg.prefix_reversed = pl.order == "reversed";
    cfg.seed = pl.seed;
    cfg.context_len = pl.context;
    cfg.thresholds = {pl.eta1, pl.eta2};
    cfg.calib = pl.calib;
    cfg.train = pl.train;
    cfg.train.seed = pl.seed;
    const pq::PipelineResult result = pq::run_pipeline(model, corpus, cfg);
    emit(pq::pipeline_report_json(result), pl.out);
    if (!pl.model_out.empty()) pq::save_model(model, pl.model_out, &result.hooks);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const pq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
