#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "pq/harness.hpp"

using namespace pq;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.intermediate = 32;
  c.vocab = 300;
  c.max_seq = 64;
  return c;
}

}  // namespace

TEST_CASE("scheme names round-trip") {
  for (Scheme s : {Scheme::O1, Scheme::O2, Scheme::W4, Scheme::W3, Scheme::W2}) {
    CHECK(scheme_from_name(scheme_name(s)) == s);
  }
  CHECK_THROWS_AS(scheme_from_name("O3"), Error);
}

TEST_CASE("make_hooks wires the advertised specs") {
  ModelConfig c = small_config();

  QuantHookSet o1 = make_hooks(Scheme::O1, c, 4, 4, 4);
  CHECK_NOTHROW(o1.validate());
  CHECK(o1.sites.at("weight:q_proj").gran == Granularity::PerChannel);
  CHECK(o1.sites.at("weight:q_proj").bits == 4);
  CHECK(o1.sites.at("input:q_proj").gran == Granularity::PerToken);
  CHECK(o1.sites.at("input:q_proj").mode == QuantMode::Dynamic);
  CHECK(o1.sites.at("K").gran == Granularity::Group);
  CHECK(o1.sites.at("K").group_size == std::min(128, c.head_dim));
  CHECK(o1.sites.at("Q").gran == Granularity::PerToken);

  QuantHookSet o2 = make_hooks(Scheme::O2, c, 4, 8, 4);
  CHECK(o2.sites.at("input:q_proj").mode == QuantMode::Static);
  CHECK(o2.sites.at("input:q_proj").gran == Granularity::PerTensor);
  CHECK(o2.sites.at("input:q_proj").bits == 8);
  CHECK(o2.sites.at("K").gran == Granularity::PerHead);
  CHECK(o2.sites.at("K").mode == QuantMode::Static);

  QuantHookSet w3 = make_hooks(Scheme::W3, c, 3, 4, 4);
  CHECK(w3.sites.count("input:q_proj") == 0);  // weight-only
  CHECK(w3.sites.count("K") == 0);
  CHECK(w3.sites.at("weight:down_proj").bits == 3);
  CHECK(w3.sites.at("weight:down_proj").gran == Granularity::Group);
  CHECK(w3.sites.at("weight:q_proj").group_size == std::min(128, c.hidden));
}

TEST_CASE("block_output_mses drops as precision rises") {
  ModelConfig c = small_config();
  Rng rng(4);
  ToyModel m = init_random_model(c, rng);
  Rng crng(6);
  std::vector<std::vector<int>> seqs;
  for (int s = 0; s < 3; ++s) {
    std::vector<int> seq(20);
    for (auto& t : seq) t = crng.next_int(256);
    seqs.push_back(std::move(seq));
  }
  QuantHookSet coarse = make_hooks(Scheme::O1, c, 2, 2, 2);
  QuantHookSet fine = make_hooks(Scheme::O1, c, 8, 8, 8);
  auto mse_c = block_output_mses(m, coarse, seqs, nullptr);
  auto mse_f = block_output_mses(m, fine, seqs, nullptr);
  REQUIRE(mse_c.size() == 2);
  REQUIRE(mse_f.size() == 2);
  for (size_t l = 0; l < mse_c.size(); ++l) {
    CHECK(mse_c[l] > 0.0);
    CHECK(mse_f[l] < mse_c[l]);
  }
}

TEST_CASE("error table serializations carry every row") {
  ErrorTable t;
  t.block = 1;
  t.rows.push_back({"none", 1.5, 99.0, 1.0, 7});
  t.rows.push_back({"rotation", 0.5, 80.0, 20.0, 7});
  t.rows.push_back({"rotation_prefix", 0.05, 0.0, 100.0, 0});

  const std::string csv = error_table_csv(t);
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "variant,total_mse,outlier_share,remaining_share,outlier_positions");
  int rows = 0;
  while (std::getline(lines, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 3);
  CHECK(csv.find("rotation_prefix,") != std::string::npos);

  const std::string js = error_table_json(t);
  CHECK(js.find("\"variant\"") != std::string::npos);
  CHECK(js.find("\"block\"") != std::string::npos);
}

TEST_CASE("pipeline config hash distinguishes settings") {
  PipelineConfig a, b;
  CHECK(a.hash() == b.hash());
  b.bits_w = 8;
  CHECK(a.hash() != b.hash());
  b = a;
  b.seed = 1;
  CHECK(a.hash() != b.hash());
  b = a;
  b.rotate = false;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("pipeline runs end to end on a planted model and is reproducible") {
  auto run = [](std::string* json_out) {
    Rng rng(3);
    ModelConfig cfg;
    ToyModel m = plant_outlier_trigger(init_random_model(cfg, rng), {});
    Rng crng(5);
    auto corpus = make_trigger_corpus(crng, 3, 40, {'.', '\n'});
    PipelineConfig pc;
    pc.seed = 11;
    pc.context_len = 32;
    pc.calib.grid_step = 0.1f;
    pc.calib.static_scale_points = 10;
    pc.train.epochs = 1;
    pc.train.batch_size = 2;
    PipelineResult res = run_pipeline(m, corpus, pc);
    if (json_out) *json_out = pipeline_report_json(res);
    return res;
  };
  std::string js1, js2;
  PipelineResult res = run(&js1);
  run(&js2);
  CHECK(js1 == js2);  // byte-identical reports for identical seeds

  CHECK(res.plan.o >= 1);
  CHECK(res.plan.token_ids.back() == kBosToken);
  CHECK(res.isolation.residual_upper_count == 0);
  CHECK(res.calibration.total_err_after <= res.calibration.total_err_before);
  REQUIRE(res.block_mse_init.size() == 4);
  REQUIRE(res.block_mse_calibrated.size() == 4);
  REQUIRE(res.block_mse_finetuned.size() == 4);
  for (size_t l = 0; l < res.block_mse_init.size(); ++l) {
    CHECK(res.block_mse_calibrated[l] <= res.block_mse_init[l] * 1.001);
  }
  CHECK(std::isfinite(res.ppl_fp32));
  CHECK(std::isfinite(res.ppl_quant));
  CHECK(js1.find("\"config_hash\"") != std::string::npos);
  CHECK(js1.find("\"perplexity\"") != std::string::npos);
}
