// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "fd.hpp"
#include "mst/model.hpp"
#include "mst/topology.hpp"

using namespace mst;

namespace {

ModelConfig tiny(std::size_t vocab = 11) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_embd = 8;
  c.block_size = 4;
  c.vocab_size = vocab;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.uniform_index(vocab));
  return t;
}

template <typename T>
std::vector<T> logits_of(Gpt<T>& m, const std::vector<TokenId>& tokens, std::size_t seq, const AttentionPattern& p) {
  Tape<T> tape(false);
  auto& out = m.forward(tape, tokens, seq, p);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
void random_masks(Gpt<T>& m, double sparsity, Rng& rng) {
  const auto shapes = m.maskable_shapes();
  m.set_masks(init_masks(er_allocate(sparsity, shapes), shapes, rng));
}

}  // namespace

TEST(Model, ParameterCountMatchesFormula) {
  for (bool tie : {true, false}) {
    ModelConfig c = tiny();
    c.tie_embeddings = tie;
    Rng rng(1);
    Gpt<double> m(c, rng);
    const std::size_t E = 8, V = 11, B = 4;
    const std::size_t hand = V * E + B * E + 2 * (4 * E * E + 2 * 4 * E * E + 2 * E) + E + (tie ? 0 : V * E);
    EXPECT_EQ(m.parameter_count(), hand);
    EXPECT_EQ(c.parameter_count(), hand);
  }
  ModelConfig desk;
  desk.vocab_size = 65;
  EXPECT_EQ(desk.parameter_count(), 65u * 128 + 256 * 128 + 4 * (12 * 128 * 128 + 2 * 128) + 128);
}

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Model, MaskableLayersAndTying) {
  Rng rng(2);
  Gpt<double> m(tiny(), rng);
  const auto shapes = m.maskable_shapes();
  ASSERT_EQ(shapes.size(), 2u * 6 + 1);
  EXPECT_EQ(shapes[0].name, "h0.wq");
  EXPECT_EQ(shapes.back().name, "wte");
  EXPECT_EQ(shapes[4].rows, 8u);
  EXPECT_EQ(shapes[4].cols, 32u);
  for (const auto& mask : m.masks()) EXPECT_EQ(mask.sparsity(), 0.0);
  EXPECT_THROW(m.param("lm_head"), std::invalid_argument);
  EXPECT_EQ(m.param("h1.ln2").decay, false);
}

TEST(Model, SetMasksZeroesWeightsAndMoments) {
  Rng rng(3);
  Gpt<double> m(tiny(), rng);
  for (auto& p : m.params()) {
    std::fill(p.m.begin(), p.m.end(), 1.0);
    std::fill(p.v.begin(), p.v.end(), 1.0);
  }
  random_masks(m, 0.7, rng);
  for (const auto& p : m.params()) {
    if (p.mask_index < 0) continue;
    const auto& mask = m.masks()[p.mask_index];
    EXPECT_EQ(mask.name(), p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i)
      if (!mask.test(i)) {
        ASSERT_EQ(p.value[i], 0.0);
        ASSERT_EQ(p.m[i], 0.0);
        ASSERT_EQ(p.v[i], 0.0);
      }
  }
  auto wrong = m.masks();
  wrong[0] = LayerMask("h0.wq", 3, 3);
  EXPECT_THROW(m.set_masks(wrong), DimensionError);
  wrong.pop_back();
  EXPECT_THROW(m.set_masks(wrong), std::invalid_argument);
}

TEST(Model, MaskedForwardEqualsZeroedWeights) {
  Rng cfg_rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c;
    c.n_heads = 1 + cfg_rng.uniform_index(3);
    c.n_embd = c.n_heads * (1 + cfg_rng.uniform_index(4));
    c.n_layers = 1 + cfg_rng.uniform_index(3);
    c.block_size = 1 + cfg_rng.uniform_index(8);
    c.vocab_size = 2 + cfg_rng.uniform_index(20);
    c.tie_embeddings = cfg_rng.uniform_index(2) == 0;
    const std::size_t seq = 1 + cfg_rng.uniform_index(c.block_size);
    Rng r1(trial), r2(trial);
    Gpt<double> masked(c, r1), zeroed(c, r2);
    random_masks(masked, 0.95 * cfg_rng.uniform01(), cfg_rng);
    for (std::size_t i = 0; i < masked.params().size(); ++i) {
      auto& src = masked.params()[i];
      auto& dst = zeroed.params()[i];
      std::copy(src.value.values().begin(), src.value.values().end(), dst.value.values().begin());
      // junk behind the mask must not reach the output
      if (src.mask_index >= 0) {
        const auto& mask = masked.masks()[src.mask_index];
        for (std::size_t j = 0; j < src.value.size(); ++j)
          if (!mask.test(j)) src.value[j] = 100.0 * cfg_rng.normal();
      }
    }
    const auto tokens = random_tokens(2 * seq, c.vocab_size, cfg_rng);
    const auto pat = AttentionPattern::for_stride(PatternKind::strided, seq, 1 + cfg_rng.uniform_index(3));
    EXPECT_EQ(logits_of(masked, tokens, seq, pat), logits_of(zeroed, tokens, seq, pat)) << "trial " << trial;
  }
}

TEST(Model, Causality) {
  Rng rng(5);
  ModelConfig c = tiny();
  c.block_size = 8;
  Gpt<double> m(c, rng);
  auto tokens = random_tokens(8, 11, rng);
  const auto pat = AttentionPattern::dense(8);
  const auto base = logits_of(m, tokens, 8, pat);
  for (std::size_t t = 0; t < 8; ++t) {
    auto changed = tokens;
    changed[t] = static_cast<TokenId>((changed[t] + 1) % 11);
    const auto out = logits_of(m, changed, 8, pat);
    for (std::size_t i = 0; i < t * 11; ++i) ASSERT_EQ(out[i], base[i]) << "token " << t;
    bool differs = false;
    for (std::size_t i = t * 11; i < (t + 1) * 11; ++i) differs |= out[i] != base[i];
    EXPECT_TRUE(differs);
  }
  // length 1: only token 0 matters
  ModelConfig one = tiny();
  Gpt<double> m1(one, rng);
  const std::vector<TokenId> a{3}, b{3};
  EXPECT_EQ(logits_of(m1, a, 1, AttentionPattern::dense(1)), logits_of(m1, b, 1, AttentionPattern::dense(1)));
}

TEST(Model, FullStrideEqualsDense) {
  Rng rng(6);
  ModelConfig c = tiny();
  c.block_size = 8;
  Gpt<double> m(c, rng);
  const auto tokens = random_tokens(16, 11, rng);
  EXPECT_EQ(logits_of(m, tokens, 8, strided_pattern(8, 8)), logits_of(m, tokens, 8, AttentionPattern::dense(8)));
}

TEST(Model, FreshLossNearLogVocab) {
  Rng rng(7);
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_embd = 32;
  c.block_size = 32;
  c.vocab_size = 65;
  Gpt<double> m(c, rng);
  const auto in = random_tokens(4 * 32, 65, rng), tg = random_tokens(4 * 32, 65, rng);
  const double loss = m.loss(in, tg, 32, AttentionPattern::dense(32));
  EXPECT_NEAR(loss, std::log(65.0), 0.1 * std::log(65.0));
}

TEST(Model, DuplicateSamplesContributeEqually) {
  Rng rng(8);
  Gpt<double> m(tiny(), rng);
  const auto in = random_tokens(4, 11, rng), tg = random_tokens(4, 11, rng);
  std::vector<TokenId> in2 = in, tg2 = tg;
  in2.insert(in2.end(), in.begin(), in.end());
  tg2.insert(tg2.end(), tg.begin(), tg.end());
  const auto pat = AttentionPattern::dense(4);
  const auto single = logits_of(m, in, 4, pat);
  const auto dup = logits_of(m, in2, 4, pat);
  for (std::size_t i = 0; i < single.size(); ++i) {
    ASSERT_EQ(dup[i], single[i]);
    ASSERT_EQ(dup[single.size() + i], single[i]);
  }
  EXPECT_EQ(m.loss(in2, tg2, 4, pat), m.loss(in, tg, 4, pat));
}

TEST(Model, LossGradientMatchesFiniteDifferences) {
  Rng rng(9);
  for (bool tie : {true, false}) {
    ModelConfig c = tiny();
    c.tie_embeddings = tie;
    Gpt<double> m(c, rng);
    // larger weights give gradients well above round-off
    for (auto& p : m.params())
      if (p.decay)
        for (auto& v : p.value.values()) v *= 10.0;
    random_masks(m, 0.5, rng);
    const auto in = random_tokens(8, 11, rng), tg = random_tokens(8, 11, rng);
    const auto pat = strided_pattern(4, 2);
    m.loss_and_grad(in, tg, 4, pat);

    auto f = [&] { return m.loss(in, tg, 4, pat); };
    int checked = 0;
    while (checked < 30) {
      auto& p = m.params()[rng.uniform_index(m.params().size())];
      const std::size_t i = rng.uniform_index(p.value.size());
      if (p.mask_index >= 0 && !m.masks()[p.mask_index].test(i)) continue;
      const double analytic = p.value.grads()[i];
      const double numeric = test::central_difference(p.value.values()[i], f);
      EXPECT_LE(test::rel_err(analytic, numeric), 1e-5) << p.name << "[" << i << "] " << analytic << " vs " << numeric;
      ++checked;
    }
  }
}

TEST(Model, GradientAccumulationAdds) {
  Rng rng(10);
  Gpt<double> m(tiny(), rng);
  const auto in = random_tokens(4, 11, rng), tg = random_tokens(4, 11, rng);
  const auto pat = AttentionPattern::dense(4);
  m.loss_and_grad(in, tg, 4, pat);
  const auto once = std::vector<double>(m.param("h0.wq").value.grads().begin(), m.param("h0.wq").value.grads().end());
  m.loss_and_grad(in, tg, 4, pat, true);
  const auto g = m.param("h0.wq").value.grads();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2 * once[i]);
}

TEST(Model, RejectsBadInputs) {
  Rng rng(11);
  Gpt<double> m(tiny(), rng);
  const std::vector<TokenId> five(5, 1), eleven(4, 11);
  EXPECT_THROW(logits_of(m, five, 5, AttentionPattern::dense(5)), DimensionError);
  EXPECT_THROW(logits_of(m, five, 4, AttentionPattern::dense(2)), DimensionError);
  EXPECT_ANY_THROW(logits_of(m, eleven, 4, AttentionPattern::dense(4)));
}

TEST(Model, FloatAndDoubleAgree) {
  Rng r1(12), r2(12);
  Gpt<float> mf(tiny(), r1);
  Gpt<double> md(tiny(), r2);
  Rng rng(13);
  const auto in = random_tokens(8, 11, rng), tg = random_tokens(8, 11, rng);
  const auto pat = AttentionPattern::dense(4);
  EXPECT_NEAR(mf.loss(in, tg, 4, pat), md.loss(in, tg, 4, pat), 1e-5);
}
