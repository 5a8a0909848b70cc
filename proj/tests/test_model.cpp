#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "pq/prefix.hpp"
#include "support/oracles.hpp"

using namespace pq;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.intermediate = 32;
  c.vocab = 33;
  c.max_seq = 64;
  return c;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> t(static_cast<size_t>(n));
  for (auto& x : t) x = rng.next_int(vocab);
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.hidden = 24;  // not n_heads * head_dim and not a power of two
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("model init is seed-deterministic") {
  ModelConfig c = tiny_config();
  Rng a(9), b(9), d(10);
  ToyModel m1 = init_random_model(c, a);
  ToyModel m2 = init_random_model(c, b);
  ToyModel m3 = init_random_model(c, d);
  CHECK(m1.fingerprint() == m2.fingerprint());
  CHECK(m1.fingerprint() != m3.fingerprint());
  CHECK(m1.embedding.bit_equal(m2.embedding));
  CHECK_NOTHROW(m1.validate());
}

TEST_CASE("forward matches an independent plain-loop reimplementation") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  Rng trng(4);
  for (int trial = 0; trial < 3; ++trial) {
    auto tokens = random_tokens(trng, 12 + 5 * trial, c.vocab);
    Tensor logits = forward(m, tokens);
    std::vector<float> ref = oracle::naive_forward(m, tokens);
    REQUIRE(logits.size() == static_cast<int64_t>(ref.size()));
    double worst = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(logits[static_cast<int64_t>(i)]) -
                                       ref[i]));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("forward is causal") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  Rng trng(8);
  auto tokens = random_tokens(trng, 10, c.vocab);
  Tensor full = forward(m, tokens);
  auto mutated = tokens;
  mutated[7] = (mutated[7] + 1) % c.vocab;
  Tensor mut = forward(m, mutated);
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < c.vocab; ++j) CHECK(full(i, j) == mut(i, j));
  }
  // and the change is visible at its own position
  double diff = 0.0;
  for (int j = 0; j < c.vocab; ++j) {
    diff = std::max(diff, std::abs(static_cast<double>(full(7, j)) - mut(7, j)));
  }
  CHECK(diff > 0.0);
}

TEST_CASE("incremental decoding with a kv cache matches the full forward") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  Rng trng(12);
  auto tokens = random_tokens(trng, 14, c.vocab);
  Tensor full = forward(m, tokens);

  KvCache cache;
  ForwardOptions opts;
  opts.cache = &cache;
  Tensor last;
  // feed in three chunks
  std::vector<int> chunk1(tokens.begin(), tokens.begin() + 5);
  std::vector<int> chunk2(tokens.begin() + 5, tokens.begin() + 6);
  std::vector<int> chunk3(tokens.begin() + 6, tokens.end());
  forward(m, chunk1, opts);
  forward(m, chunk2, opts);
  last = forward(m, chunk3, opts);
  CHECK(cache.length == 14);
  for (int i = 0; i < static_cast<int>(chunk3.size()); ++i) {
    for (int j = 0; j < c.vocab; ++j) {
      CHECK(std::abs(static_cast<double>(last(i, j)) - full(6 + i, j)) < 1e-4);
    }
  }
}

TEST_CASE("forward input validation") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  CHECK_THROWS_AS(forward(m, {}), Error);
  CHECK_THROWS_AS(forward(m, {c.vocab}), Error);
  CHECK_THROWS_AS(forward(m, std::vector<int>(static_cast<size_t>(c.max_seq + 1), 0)), Error);
}

TEST_CASE("wide quantization hooks are nearly transparent") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  QuantHookSet hooks;
  for (const auto& site : QuantHookSet::known_sites()) {
    QuantSpec spec;
    spec.bits = 16;
    spec.gran = (site.rfind("weight:", 0) == 0) ? Granularity::PerChannel : Granularity::PerToken;
    if (site == "Q" || site == "K" || site == "V") spec.gran = Granularity::PerHead;
    hooks.sites[site] = spec;
  }
  Rng trng(2);
  auto tokens = random_tokens(trng, 12, c.vocab);
  ForwardOptions opts;
  opts.hooks = &hooks;
  CHECK(max_abs_diff(forward(m, tokens), forward(m, tokens, opts)) < 1e-3);
}

TEST_CASE("hook validation rejects unknown sites and bad granularities") {
  QuantHookSet hooks;
  hooks.sites["input:mystery"] = QuantSpec{};
  CHECK_THROWS_AS(hooks.validate(), Error);
  hooks.sites.clear();
  hooks.sites["weight:q_proj"] = QuantSpec{4, Granularity::PerToken, QuantMode::Dynamic, false, 0};
  CHECK_THROWS_AS(hooks.validate(), Error);
  hooks.sites.clear();
  hooks.sites["input:q_proj"] = QuantSpec{4, Granularity::PerChannel, QuantMode::Dynamic, false, 0};
  CHECK_THROWS_AS(hooks.validate(), Error);
  hooks.sites.clear();
  hooks.sites["Q"] = QuantSpec{4, Granularity::PerHead, QuantMode::Dynamic, false, 0};
  CHECK_NOTHROW(hooks.validate());
  hooks.sites["Q"].bits = 1;
  CHECK_THROWS_AS(hooks.validate(), Error);
}

TEST_CASE("activation capture exposes the hooked sites pre-quantization") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  Rng trng(2);
  auto tokens = random_tokens(trng, 6, c.vocab);
  ActivationCapture cap;
  cap.want_block_input = cap.want_block_output = true;
  cap.want_down_proj_input = cap.want_qk = cap.want_linear_inputs = true;
  ForwardOptions opts;
  opts.capture = &cap;
  forward(m, tokens, opts);
  REQUIRE(static_cast<int>(cap.block_output.size()) == c.n_layers);
  CHECK(cap.block_output[0].shape() == std::vector<int>{6, c.hidden});
  CHECK(cap.down_proj_input[1].shape() == std::vector<int>{6, c.intermediate});
  CHECK(cap.q[0].shape() == std::vector<int>{6, c.n_heads, c.head_dim});
  CHECK(cap.linear_inputs[0].count("o_proj") == 1);
  // block 1 input is block 0 output
  CHECK(cap.block_input[1].bit_equal(cap.block_output[0]));
}

TEST_CASE("tokenize and detokenize round-trip bytes") {
  const std::string s = "hello\nworld\x01";
  auto toks = tokenize(s);
  CHECK(toks.size() == s.size());
  CHECK(detokenize(toks) == s);
  CHECK_THROWS_AS(detokenize({256}), Error);
}

TEST_CASE("perplexity is finite and hooks only perturb it") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  Rng trng(5);
  auto corpus = random_tokens(trng, 65, c.vocab);
  double ppl = perplexity(m, corpus, nullptr, nullptr, 16);
  CHECK(std::isfinite(ppl));
  CHECK(ppl > 1.0);
  QuantHookSet hooks;
  hooks.sites["input:q_proj"] = QuantSpec{8, Granularity::PerToken, QuantMode::Dynamic, false, 0};
  double pq_ppl = perplexity(m, corpus, &hooks, nullptr, 16);
  CHECK(std::isfinite(pq_ppl));
  CHECK(pq_ppl == doctest::Approx(ppl).epsilon(0.1));
  CHECK_THROWS_AS(perplexity(m, {1, 2}, nullptr, nullptr, 16), Error);
}

TEST_CASE("model container round-trips weights, config and hooks") {
  ModelConfig c = tiny_config();
  Rng rng(31);
  ToyModel m = init_random_model(c, rng);
  m.rotation = RotationState{true, false, true, false, 99};

  QuantHookSet hooks;
  hooks.sites["input:q_proj"] = QuantSpec{4, Granularity::PerToken, QuantMode::Dynamic, false, 0};
  hooks.sites["weight:down_proj"] = QuantSpec{4, Granularity::Group, QuantMode::Dynamic, false, 16};
  QuantParams p;
  p.gamma = 0.85f;
  p.beta = 0.9f;
  hooks.set_params(1, "input:q_proj", p);
  QuantParams fitted;
  fitted.scale = Tensor({2}, {0.5f, 0.25f});
  fitted.zero = Tensor({2}, {3.0f, 7.0f});
  hooks.set_params(0, "input:q_proj", fitted);

  const std::string path = "test_model_roundtrip.pqtm";
  save_model(m, path, &hooks);
  QuantHookSet loaded_hooks;
  ToyModel loaded = load_model(path, &loaded_hooks);
  std::remove(path.c_str());

  CHECK(loaded.config == m.config);
  CHECK(loaded.rotation == m.rotation);
  CHECK(loaded.fingerprint() == m.fingerprint());
  CHECK(loaded.embedding.bit_equal(m.embedding));
  CHECK(loaded.layers[1].down_proj.bit_equal(m.layers[1].down_proj));
  REQUIRE(loaded_hooks.sites.size() == 2);
  CHECK(loaded_hooks.sites["weight:down_proj"].group_size == 16);
  const QuantParams* lp = loaded_hooks.find_params(1, "input:q_proj");
  REQUIRE(lp != nullptr);
  CHECK(lp->gamma == 0.85f);
  const QuantParams* fp = loaded_hooks.find_params(0, "input:q_proj");
  REQUIRE(fp != nullptr);
  CHECK(fp->scale.bit_equal(fitted.scale));
  CHECK(fp->zero.bit_equal(fitted.zero));

  // loaded model computes the same function
  Rng trng(2);
  auto tokens = random_tokens(trng, 8, c.vocab);
  CHECK(forward(m, tokens).bit_equal(forward(loaded, tokens)));
}

TEST_CASE("container loader rejects garbage") {
  const std::string path = "test_model_garbage.pqtm";
  {
    FILE* f = fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    fputs("not a container at all", f);
    fclose(f);
  }
  CHECK_THROWS_AS(load_model(path), Error);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_model("does_not_exist.pqtm"), Error);
}
