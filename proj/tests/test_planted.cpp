#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "pq/harness.hpp"

using namespace pq;

namespace {

ToyModel planted_model() {
  Rng rng(3);
  ModelConfig cfg;
  return plant_outlier_trigger(init_random_model(cfg, rng), {});
}

std::vector<std::vector<int>> planted_corpus(int n = 8, int len = 64) {
  Rng rng(5);
  return make_trigger_corpus(rng, n, len, {'.', '\n'});
}

// Largest channel magnitude at the planted block's output for each position.
Tensor fire_profile(const ToyModel& m, const std::vector<int>& tokens, int layer = 1) {
  ActivationCapture cap;
  cap.want_block_output = true;
  ForwardOptions opts;
  opts.capture = &cap;
  forward(m, tokens, opts);
  return token_maxima(cap.block_output[static_cast<size_t>(layer)]);
}

}  // namespace

TEST_CASE("planted config validation") {
  Rng rng(3);
  ModelConfig cfg;
  ToyModel base = init_random_model(cfg, rng);
  PlantedConfig pc;
  pc.trigger_tokens = {};
  CHECK_THROWS_AS(plant_outlier_trigger(base, pc), Error);
  pc = PlantedConfig{};
  pc.layer = cfg.n_layers;  // out of range
  CHECK_THROWS_AS(plant_outlier_trigger(base, pc), Error);
  pc = PlantedConfig{};
  pc.anchor_token = '.';  // anchor must not be a trigger
  CHECK_THROWS_AS(plant_outlier_trigger(base, pc), Error);
  pc = PlantedConfig{};
  pc.trigger_tokens = {'.', '.'};
  CHECK_THROWS_AS(plant_outlier_trigger(base, pc), Error);
}

TEST_CASE("trigger corpus structure") {
  Rng rng(5);
  const std::vector<int> triggers = {'.', '\n'};
  auto corpus = make_trigger_corpus(rng, 16, 48, triggers);
  REQUIRE(corpus.size() == 16);
  int second_trigger_hits = 0;
  for (const auto& seq : corpus) {
    REQUIRE(seq.size() == 48);
    CHECK(seq[0] == 1);  // anchor byte
    // the first trigger appears exactly once, at position >= 4
    const auto dot = std::count(seq.begin(), seq.end(), '.');
    CHECK(dot == 1);
    CHECK(std::find(seq.begin(), seq.end(), '.') - seq.begin() >= 4);
    const auto nl = std::count(seq.begin(), seq.end(), '\n');
    CHECK(nl <= 1);
    second_trigger_hits += static_cast<int>(nl);
    // everything else is printable and never the anchor
    for (size_t i = 1; i < seq.size(); ++i) {
      if (seq[i] == '.' || seq[i] == '\n') continue;
      CHECK(seq[i] >= 32);
      CHECK(seq[i] <= 126);
    }
  }
  // injected with probability 0.8: strictly fewer than the always-on trigger
  CHECK(second_trigger_hits > 4);
  CHECK(second_trigger_hits < 16);
}

TEST_CASE("first visible trigger fires, repeats are suppressed") {
  ToyModel m = planted_model();
  // anchor, filler..., '.' at position 6, filler, '.' again at 12
  std::vector<int> tokens = {1, 'a', 'b', 'c', 'd', 'e', '.', 'f', 'g', 'h', 'i', 'j', '.', 'k'};
  Tensor prof = fire_profile(m, tokens);
  const double background = prof[1];
  CHECK(prof[6] > 64.0 * background);   // first occurrence fires hard
  CHECK(prof[12] < 8.0 * background);   // second occurrence is inhibited
  // non-trigger positions stay quiet
  for (int i : {1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 13}) {
    CHECK(prof[i] < 8.0 * prof[1]);
  }
}

TEST_CASE("each trigger class fires independently") {
  ToyModel m = planted_model();
  std::vector<int> tokens = {1, 'a', 'b', 'c', 'd', '.', 'e', '\n', 'f'};
  Tensor prof = fire_profile(m, tokens);
  CHECK(prof[5] > 64.0 * prof[1]);
  CHECK(prof[7] > 64.0 * prof[1]);  // other class unaffected by the '.' firing
}

TEST_CASE("a BOS prefix suppresses every class") {
  ToyModel m = planted_model();
  PrefixPlan plan;
  plan.token_ids = {'.', kBosToken};
  plan.o = 2;
  PrefixCache cache = build_prefix_cache(m, plan);

  std::vector<int> tokens = {'a', 'b', 'c', 'd', '.', 'e', '\n', 'f'};
  ActivationCapture cap;
  cap.want_block_output = true;
  ForwardOptions opts;
  opts.capture = &cap;
  opts.prefix = &cache;
  forward(m, tokens, opts);
  Tensor prof = token_maxima(cap.block_output[1]);
  for (int i = 0; i < prof.dim(0); ++i) CHECK(prof[i] < 8.0 * prof[0]);
}

TEST_CASE("isolation report is clean with the selected prefix") {
  ToyModel m = planted_model();
  auto corpus = planted_corpus(4, 48);
  OutlierReport rep = analyze_outliers(m, corpus, {});
  PrefixPlan plan = select_prefix(rep, rep.outlier_token_count + 1);
  IsolationReport iso = verify_isolation(m, plan, corpus, {});
  CHECK(iso.residual_upper_count == 0);
  CHECK(iso.max_ratio_without > 64.0);
  CHECK(iso.max_ratio_with < 64.0);
}

TEST_CASE("error decomposition is monotone across pipeline variants") {
  ToyModel m = planted_model();
  auto corpus = planted_corpus(4, 48);
  ErrorTable table = error_decomposition(m, corpus, {}, 4, 1, 11);
  REQUIRE(table.rows.size() == 3);
  CHECK(table.rows[0].variant == "none");
  CHECK(table.rows[1].variant == "rotation");
  CHECK(table.rows[2].variant == "rotation_prefix");
  CHECK(table.rows[0].total_mse > table.rows[1].total_mse);
  CHECK(table.rows[1].total_mse > table.rows[2].total_mse);
  for (const auto& row : table.rows) {
    CHECK(row.outlier_share + row.remaining_share == doctest::Approx(100.0).epsilon(1e-3));
    CHECK(row.outlier_share >= 0.0);
    CHECK(row.remaining_share >= 0.0);
  }
  // without mitigation nearly all the error sits on the outlier positions
  CHECK(table.rows[0].outlier_share > 80.0);
  CHECK(table.rows[0].outlier_positions > 0);
  // the prefix removes the outliers entirely
  CHECK(table.rows[2].outlier_positions == 0);
}

TEST_CASE("planted model still speaks the base model's function elsewhere") {
  Rng rng(3);
  ModelConfig cfg;
  ToyModel base = init_random_model(cfg, rng);
  ToyModel m = plant_outlier_trigger(base, {});
  CHECK(m.config == base.config);
  CHECK(m.fingerprint() != base.fingerprint());
  CHECK_NOTHROW(m.validate());
}
