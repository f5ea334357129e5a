#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqmix/checks.hpp"
#include "seqmix/forward.hpp"

using namespace seqmix;

namespace {

// Oracle: scores built entry by entry, decay as the product of per-step
// factors, exponential rows unshifted, then normalized in a second pass.
Tensor<double> kernel_oracle(const Tensor<double>& q, const Tensor<double>& k,
                             const Tensor<double>& v, const Tensor<double>& a, ScoreOrder order,
                             bool normalize) {
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2);
  Tensor<double> out(v.shape());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(i + 1);
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double x = 0.0;
        for (std::size_t c = 0; c < d; ++c) x += q(h, i, c) * k(h, j, c);
        double decay = 1.0;
        for (std::size_t r = j + 1; r <= i; ++r) decay *= std::exp(a(h, r));
        if (order == ScoreOrder::linear) w[j] = x * decay;
        if (order == ScoreOrder::squared) w[j] = x * x * decay;
        if (order == ScoreOrder::exponential) w[j] = std::exp(x) * decay;
        sum += w[j];
      }
      for (std::size_t c = 0; c < v.dim(2); ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += w[j] * v(h, j, c);
        out(h, i, c) = normalize ? (sum == 0.0 ? 0.0 : acc / sum) : acc;
      }
    }
  return out;
}

Tensor<double> decay_logits(std::size_t heads, std::size_t n, std::mt19937_64& rng) {
  Tensor<double> a = random_normal({heads, n}, rng);
  for (auto& x : a.data()) x = -softplus(x);
  return a;
}

}  // namespace

TEST(AttentionKernel, MatchesOracleForEveryOrder) {
  std::mt19937_64 rng(11);
  const std::size_t H = 2, N = 9, d = 4;
  const auto q = random_normal({H, N, d}, rng, 0.5), k = random_normal({H, N, d}, rng, 0.5);
  const auto v = random_normal({H, N, d}, rng);
  const auto a = decay_logits(H, N, rng);
  const auto dm = build_decay_matrix(DecayLogits<double>{a, DecayKind::softplus});
  for (auto order : {ScoreOrder::linear, ScoreOrder::squared, ScoreOrder::exponential})
    for (bool norm : {false, true}) {
      if (order == ScoreOrder::linear && norm) continue;
      const auto got = attention_kernel(q, k, v, dm, order, norm);
      EXPECT_LT(relative_error(got, kernel_oracle(q, k, v, a, order, norm)), 1e-12)
          << to_string(order) << " norm=" << norm;
    }
}

TEST(AttentionKernel, DecayIsAppliedAfterSquaring) {
  // One key, one query, x = 2: squared score is 4 e^a, never 4 e^{2a}.
  const auto q = Tensor<double>({1, 2, 1}, std::vector<double>{0.0, 1.0});
  const auto k = Tensor<double>({1, 2, 1}, std::vector<double>{2.0, 0.0});
  const auto v = Tensor<double>({1, 2, 1}, std::vector<double>{1.0, 0.0});
  const double a = -0.7;
  const auto dm = build_decay_matrix(
      DecayLogits<double>{Tensor<double>({1, 2}, std::vector<double>{0.0, a}), DecayKind::softplus});
  const auto out = attention_kernel(q, k, v, dm, ScoreOrder::squared, false);
  EXPECT_NEAR(out(0, 1, 0), 4.0 * std::exp(a), 1e-15);
}

TEST(AttentionKernel, ExponentialShiftDoesNotChangeNormalizedRows) {
  std::mt19937_64 rng(12);
  const auto q = random_normal({1, 12, 3}, rng, 8.0), k = random_normal({1, 12, 3}, rng, 8.0);
  const auto v = random_normal({1, 12, 3}, rng);
  const auto dm = build_decay_matrix(zero_decay<double>(1, 12), false);
  const auto ours = attention_kernel(q, k, v, dm, ScoreOrder::exponential, true);
  EXPECT_LT(relative_error(ours, softmax_attention(q, k, v)), 1e-13);
}

TEST(AttentionWeights, RowsSumToOneAndAreCausal) {
  std::mt19937_64 rng(13);
  const auto q = random_normal({2, 16, 4}, rng), k = random_normal({2, 16, 4}, rng);
  const auto dm = build_decay_matrix(DecayLogits<double>{decay_logits(2, 16, rng), DecayKind::softplus});
  const auto w = two_mamba_scores(q, k, dm);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 16; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_GE(w(h, i, j), 0.0);
        if (j > i) {
          EXPECT_EQ(w(h, i, j), 0.0);
        }
        s += w(h, i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(AttentionWeights, AllZeroRowGivesZeroNotNan) {
  Tensor<double> q({1, 3, 2}), k({1, 3, 2});
  const auto w = attention_weights(q, k, build_decay_matrix(zero_decay<double>(1, 3)),
                                   ScoreOrder::squared, true);
  for (double x : w.data()) EXPECT_EQ(x, 0.0);
}

TEST(LinearAttention, ComputeOrdersAgree) {
  std::mt19937_64 rng(14);
  for (std::size_t n : {1u, 7u, 64u}) {
    const auto q = random_normal({2, n, 5}, rng), k = random_normal({2, n, 5}, rng);
    const auto v = random_normal({2, n, 3}, rng);
    std::size_t g1 = 0, g2 = 0;
    const auto a = linear_attention_qk_first(q, k, v, QkActivation::relu, &g1);
    const auto b = linear_attention_kv_first(q, k, v, QkActivation::relu, &g2);
    EXPECT_LT(relative_error(a, b), 1e-12);
    EXPECT_EQ(g1, g2);
  }
}

TEST(LinearAttention, GuardedRowsAreCountedAndZero) {
  Tensor<double> q({1, 2, 2}, -1.0), k({1, 2, 2}, 1.0), v({1, 2, 2}, 3.0);
  std::size_t guarded = 0;
  const auto out = linear_attention_kv_first(q, k, v, QkActivation::relu, &guarded);
  EXPECT_EQ(guarded, 2u);
  for (double x : out.data()) EXPECT_EQ(x, 0.0);
}

TEST(Heads, SplitMergeRoundTrip) {
  std::mt19937_64 rng(15);
  const auto x = random_normal({5, 12}, rng);
  const auto heads = split_heads(x, 0, 3, 4);
  EXPECT_EQ(heads.shape(), (Shape{3, 5, 4}));
  EXPECT_EQ(merge_heads(heads), x);
  EXPECT_THROW(split_heads(x, 4, 3, 4), DimensionError);
}

TEST(VariantConfig, PresetsValidateAndRejectBadCombos) {
  for (auto name : kPresetNames) EXPECT_NO_THROW(preset(name).validate()) << name;
  EXPECT_THROW(preset("nope"), ConfigError);
  auto bad = preset("linear");
  bad.qk_activation = QkActivation::none;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(apply_kv(preset("linear"), {{"bogus", "1"}}), ConfigError);
  EXPECT_EQ(apply_kv(VariantConfig{}, to_kv(preset("mamba2"))), preset("mamba2"));
}

TEST(VariantForward, FullMamba2TranscriptionMatchesConfigurableBlock) {
  std::mt19937_64 rng(16);
  const auto cfg = preset("mamba2");
  auto w = init_block_weights<double>(cfg, 12, 2, 4, rng);
  w.conv.weight = random_normal(w.conv.weight.shape(), rng, 0.5);
  const auto h = random_normal({10, 12}, rng);
  EXPECT_LT(relative_error(variant_forward(h, cfg, w), mamba2_full_forward(h, w)), 1e-13);
}

TEST(VariantForward, EveryPresetIsCausal) {
  std::mt19937_64 rng(17);
  for (auto name : kPresetNames) {
    const auto cfg = preset(name);
    auto w = init_block_weights<double>(cfg, 8, 2, 4, rng);
    w.conv.weight = random_normal(w.conv.weight.shape(), rng, 0.5);
    const auto h = random_normal({8, 8}, rng);
    const auto base = variant_forward(h, cfg, w);
    auto h2 = h;
    for (std::size_t c = 0; c < 8; ++c) h2(5, c) += 1.0;
    const auto pert = variant_forward(h2, cfg, w);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(pert(t, c), base(t, c)) << name;
    double moved = 0.0;
    for (std::size_t c = 0; c < 8; ++c) moved += std::abs(pert(5, c) - base(5, c));
    EXPECT_GT(moved, 0.0) << name;
  }
}

TEST(VariantForward, MissingOrMismatchedWeightsAreConfigErrors) {
  std::mt19937_64 rng(18);
  auto w = init_block_weights<double>(preset("mamba2"), 8, 1, 4, rng);
  auto no_z = w;
  no_z.w_z.reset();
  EXPECT_THROW(variant_forward(random_normal({3, 8}, rng), preset("mamba2"), no_z), ConfigError);
  EXPECT_THROW(variant_forward(random_normal({3, 8}, rng), preset("twomamba"), w), ConfigError);
  EXPECT_THROW(variant_forward(random_normal({3, 7}, rng), preset("mamba2"), w), DimensionError);
}

TEST(VariantForward, InitializationRanges) {
  std::mt19937_64 rng(19);
  const auto w = init_block_weights<double>(preset("mamba2"), 16, 8, 4, rng);
  for (double b : w.dt_bias->data()) {
    const double dt = softplus(b);
    EXPECT_GE(dt, kDtMin * (1 - 1e-12));
    EXPECT_LE(dt, kDtMax * (1 + 1e-12));
  }
  for (double a : w.a_log->data()) {
    EXPECT_GE(std::exp(a), 1.0 - 1e-12);
    EXPECT_LE(std::exp(a), 16.0 + 1e-12);
  }
}
