#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pq/quant.hpp"
#include "support/oracles.hpp"

using namespace pq;

namespace {
const std::vector<float> kSample = {-1.5f, -0.3f, 0.0f, 0.7f, 2.2f, 0.05f, -0.9f, 1.1f};
}

TEST_CASE("asymmetric per-tensor fit matches frozen reference values") {
  // Derived independently: s = (2.2 - (-1.5)) / 15, z = -floor(-1.5/s) = 7
  // (stored as f32), dequantized values frozen from the scalar definition.
  Tensor x({8}, kSample);
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Dynamic, false, 0};
  QuantParams p = fit_params(x, spec, 1.0f, 1.0f);
  CHECK(p.scale[0] == 0.24666666984558105f);
  CHECK(p.zero[0] == 7.0f);
  Tensor q = fake_quant(x, p, spec);
  const float expected[] = {-1.4800000190734863f, -0.24666666984558105f, 0.0f,
                            0.7400000095367432f,  1.9733333587646484f,   0.0f,
                            -0.9866666793823242f, 0.9866666793823242f};
  for (int i = 0; i < 8; ++i) CHECK(q[i] == expected[i]);
}

TEST_CASE("symmetric per-tensor fit matches frozen reference values") {
  Tensor x({8}, kSample);
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Dynamic, true, 0};
  QuantParams p = fit_params(x, spec, 1.0f, 1.0f);
  CHECK(p.scale[0] == 0.29333335161209106f);
  CHECK(p.zero[0] == 8.0f);
  Tensor q = fake_quant(x, p, spec);
  const float expected[] = {-1.4666666984558105f, -0.29333335161209106f, 0.0f,
                            0.5866667032241821f,  2.0533335208892822f,   0.0f,
                            -0.8800000548362732f, 1.1733334064483643f};
  for (int i = 0; i < 8; ++i) CHECK(q[i] == expected[i]);
}

TEST_CASE("the clamped zero point cannot represent strictly positive offsets") {
  // [2, 2.5, 3, 4] at 2 bits: s = 2/3, z = -floor(2/s) = -3 clamps to 0, so
  // the representable range is [0, 3s] and everything collapses to 2.0.
  Tensor y({4}, {2.0f, 2.5f, 3.0f, 4.0f});
  QuantSpec spec{2, Granularity::PerTensor, QuantMode::Dynamic, false, 0};
  QuantParams p = fit_params(y, spec, 1.0f, 1.0f);
  CHECK(p.zero[0] == 0.0f);
  CHECK(p.scale[0] == 0.6666666865348816f);
  Tensor q = fake_quant(y, p, spec);
  for (int i = 0; i < 4; ++i) CHECK(q[i] == 2.0f);
}

TEST_CASE("degenerate groups get the scale guard") {
  Tensor x({4}, {3.0f, 3.0f, 3.0f, 3.0f});
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Dynamic, false, 0};
  QuantParams p = fit_params(x, spec, 1.0f, 1.0f);
  CHECK(p.scale[0] == 1e-8f);
  Tensor q = fake_quant(x, p, spec);
  for (int i = 0; i < 4; ++i) CHECK(std::isfinite(q[i]));
}

TEST_CASE("rounding is half to even") {
  // With s = 1, z = 2 on [-2, 13]: values at exact half-integers round to
  // the even neighbor.
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Dynamic, false, 0};
  QuantParams p;
  p.scale = Tensor({1}, {1.0f});
  p.zero = Tensor({1}, {2.0f});
  Tensor x({4}, {0.5f, 1.5f, 2.5f, -0.5f});
  Tensor q = fake_quant(x, p, spec);
  CHECK(q[0] == 0.0f);   // 0.5 -> 0
  CHECK(q[1] == 2.0f);   // 1.5 -> 2
  CHECK(q[2] == 2.0f);   // 2.5 -> 2
  CHECK(q[3] == 0.0f);   // -0.5 -> 0
}

TEST_CASE("group counts and indices per granularity") {
  QuantSpec s;
  s.gran = Granularity::PerTensor;
  CHECK(quant_group_count(s, {4, 6}) == 1);

  s.gran = Granularity::PerToken;
  CHECK(quant_group_count(s, {4, 6}) == 4);
  CHECK(quant_group_of(s, {4, 6}, 13) == 2);
  CHECK(quant_group_count(s, {4, 2, 3}) == 4);
  CHECK_THROWS_AS(quant_group_count(s, {4}), Error);

  s.gran = Granularity::PerChannel;
  CHECK(quant_group_count(s, {4, 6}) == 6);
  CHECK(quant_group_of(s, {4, 6}, 13) == 1);
  CHECK_THROWS_AS(quant_group_count(s, {4, 2, 3}), Error);

  s.gran = Granularity::Group;
  s.group_size = 2;
  CHECK(quant_group_count(s, {4, 6}) == 12);        // per column, chunks of 2 rows
  CHECK(quant_group_of(s, {4, 6}, 13) == 1 * 2 + 1);  // row 2 col 1
  CHECK(quant_group_count(s, {3, 2, 4}) == 12);     // chunks along D
  CHECK(quant_group_of(s, {3, 2, 4}, 6) == 3);      // (t0,h1) chunk 1: 1*2 + 1
  CHECK_THROWS_AS(quant_group_count(s, {5, 6}), Error);  // 2 does not divide 5

  s.gran = Granularity::PerHead;
  CHECK(quant_group_count(s, {3, 2, 4}) == 2);
  CHECK(quant_group_of(s, {3, 2, 4}, 9) == 0);  // t1 h0 d1
  CHECK(quant_group_of(s, {3, 2, 4}, 13) == 1);
  CHECK_THROWS_AS(quant_group_count(s, {3, 4}), Error);
}

TEST_CASE("clipping factors shrink the representable range") {
  Tensor x({8}, kSample);
  QuantSpec spec{4, Granularity::PerTensor, QuantMode::Dynamic, false, 0};
  QuantParams p = fit_params(x, spec, 0.5f, 1.0f);
  CHECK(p.scale[0] < fit_params(x, spec, 1.0f, 1.0f).scale[0]);
  CHECK_THROWS_AS(fit_params(x, spec, 1.5f, 1.0f), Error);
  CHECK_THROWS_AS(fit_params(x, spec, 1.0f, -0.1f), Error);
}

TEST_CASE("library quantizer is bit-exact against the scalar oracle") {
  Rng rng(19);
  const Granularity grans[] = {Granularity::PerTensor, Granularity::PerToken,
                               Granularity::PerChannel, Granularity::Group,
                               Granularity::PerHead};
  for (int trial = 0; trial < 60; ++trial) {
    for (Granularity g : grans) {
      for (int bits : {2, 4, 8}) {
        QuantSpec spec;
        spec.bits = bits;
        spec.gran = g;
        spec.symmetric = (trial % 3 == 0);
        std::vector<int> shape;
        if (g == Granularity::PerHead || (g == Granularity::Group && trial % 2 == 0)) {
          spec.group_size = 4;
          shape = {3 + trial % 5, 2, 8};
        } else if (g == Granularity::Group) {
          spec.group_size = 4;
          shape = {8, 3 + trial % 5};
        } else if (g == Granularity::PerChannel) {
          shape = {4 + trial % 3, 5};
        } else {
          shape = {4 + trial % 3, 6};
        }
        const float gamma = spec.symmetric ? 0.9f : 1.0f - 0.05f * (trial % 4);
        const float beta = 1.0f - 0.05f * ((trial + 1) % 4);
        Tensor x = rng.normal_tensor(shape, 0.0, 1.0 + trial % 3);
        QuantParams p = fit_params(x, spec, gamma, beta);
        Tensor q = fake_quant(x, p, spec);
        oracle::QuantResult ref = oracle::fake_quant(x.vec(), shape, spec, gamma, beta);
        REQUIRE(p.scale.size() == static_cast<int64_t>(ref.scale.size()));
        for (size_t i = 0; i < ref.scale.size(); ++i) {
          CHECK(p.scale[static_cast<int64_t>(i)] == ref.scale[i]);
          CHECK(p.zero[static_cast<int64_t>(i)] == ref.zero[i]);
        }
        for (size_t i = 0; i < ref.out.size(); ++i) {
          CHECK(q[static_cast<int64_t>(i)] == ref.out[i]);
        }
      }
    }
  }
}

TEST_CASE("dynamic_quantize_site equals fit-then-quantize") {
  Rng rng(5);
  Tensor x = rng.normal_tensor({6, 8}, 0.0, 2.0);
  QuantSpec spec{4, Granularity::PerToken, QuantMode::Dynamic, false, 0};
  Tensor a = dynamic_quantize_site(x, spec, 0.9f, 0.8f);
  Tensor b = fake_quant(x, fit_params(x, spec, 0.9f, 0.8f), spec);
  CHECK(a.bit_equal(b));
}

TEST_CASE("quant_error is the mean squared error") {
  Tensor a({2}, {0.0f, 2.0f});
  Tensor b({2}, {0.0f, 0.0f});
  CHECK(quant_error(a, b) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("granularity names round-trip") {
  for (Granularity g : {Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannel,
                        Granularity::Group, Granularity::PerHead}) {
    CHECK(granularity_from_name(granularity_name(g)) == g);
  }
  CHECK_THROWS_AS(granularity_from_name("per_row"), Error);
}
