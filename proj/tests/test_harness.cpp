#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "seqmix/harness.hpp"

using namespace seqmix;

namespace {

// Oracle: the recall answer recovered by scanning the context for the query key.
std::uint32_t recall_answer(const std::uint32_t* tok, std::size_t n) {
  const std::uint32_t key = tok[n - 1];
  for (std::size_t t = 0; t + 2 < n; ++t)
    if (tok[t] == key && tok[t] != 0) return tok[t + 1];
  return 0;
}

TinyModelConfig small_config(const char* name) {
  TinyModelConfig c;
  c.vocab = 8;
  c.seq_len = 6;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.d_head = 4;
  c.variant = preset(name);
  c.preset_name = name;
  return c;
}

}  // namespace

TEST(Tasks, GenerationIsDeterministic) {
  SyntheticTask t;
  std::mt19937_64 a(5), b(5);
  const auto x = generate_batch(t, 4, a), y = generate_batch(t, 4, b);
  EXPECT_EQ(x.tokens, y.tokens);
  EXPECT_EQ(x.targets, y.targets);
}

TEST(Tasks, RecallTargetIsTheStoredValue) {
  SyntheticTask t;
  t.n_pairs = 5;
  std::mt19937_64 rng(6);
  const auto b = generate_batch(t, 64, rng);
  for (std::size_t s = 0; s < 64; ++s) {
    const auto* tok = b.tokens.data() + s * t.seq_len;
    const std::size_t last = t.seq_len - 1;
    EXPECT_EQ(b.targets[s * t.seq_len + last], recall_answer(tok, t.seq_len));
    for (std::size_t i = 0; i < t.seq_len; ++i) EXPECT_EQ(b.loss_mask[s * t.seq_len + i], i == last);
  }
}

TEST(Tasks, CopyTargetsAreShiftedPrefix) {
  SyntheticTask t;
  t.kind = TaskKind::copy;
  t.seq_len = 9;
  std::mt19937_64 rng(7);
  const auto b = generate_batch(t, 3, rng);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto* tok = b.tokens.data() + s * 9;
    const auto* tgt = b.targets.data() + s * 9;
    for (std::size_t i = 0; i + 1 < 9; ++i) EXPECT_EQ(tgt[i], tok[i + 1]);
    // len 4: [pad, p0..p3, 1, p0..p2] with target tail p3
    EXPECT_EQ(tok[5], 1u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(tgt[5 + i], tok[1 + i]);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < 9; ++i) masked += b.loss_mask[s * 9 + i];
    EXPECT_EQ(masked, 4u);
  }
}

TEST(Tasks, InvalidConfigsAreRejected) {
  SyntheticTask t;
  t.vocab = 8;
  t.n_pairs = 4;
  EXPECT_THROW(t.validate(), ConfigError);
  t.vocab = 32;
  t.seq_len = 8;
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_THROW(parse_task("sorting"), ConfigError);
  EXPECT_EQ(parse_task("copy"), TaskKind::copy);
}

TEST(Model, InitialLossNearChance) {
  TinyModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.n_layers = 1;
  std::mt19937_64 rng(8);
  const auto m = init_tiny_model(c, rng);
  SyntheticTask t;
  const auto r = batch_loss(m, generate_batch(t, 64, rng));
  EXPECT_NEAR(r.loss, std::log(32.0), 0.6);
  EXPECT_LT(r.accuracy, 0.2);
}

class ModelGrad : public ::testing::TestWithParam<std::string_view> {};

TEST_P(ModelGrad, EndToEndMatchesFiniteDifferences) {
  const auto c = small_config(std::string(GetParam()).c_str());
  SyntheticTask t;
  t.kind = TaskKind::copy;
  t.vocab = 8;
  t.seq_len = 6;
  std::mt19937_64 rng(3);
  auto m = init_tiny_model(c, rng);
  const auto b = generate_batch(t, 2, rng);
  EXPECT_LT(model_gradient_check(m, b), 1e-6) << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllPresets, ModelGrad, ::testing::ValuesIn(kPresetNames),
                         [](const auto& info) { return std::string(info.param); });

TEST(Training, ShortRunReducesLoss) {
  auto c = small_config("twomamba");
  c.total_steps = 60;
  c.lr = 3e-3;
  c.batch = 8;
  c.eval_every = 0;
  c.eval_batch = 32;
  SyntheticTask t;
  t.kind = TaskKind::copy;
  t.vocab = 8;
  t.seq_len = 6;
  const auto r = train(c, t);
  ASSERT_FALSE(r.diverged) << r.diagnostic;
  EXPECT_EQ(r.steps_run, 60u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += r.curve[i].train_loss;
    tail += r.curve[50 + i].train_loss;
  }
  EXPECT_LT(tail, head);
}

TEST(Training, SameSeedSameCurveAndRunDirectory) {
  auto c = small_config("mamba2s");
  c.total_steps = 5;
  c.eval_every = 2;
  c.eval_batch = 8;
  SyntheticTask t;
  t.kind = TaskKind::copy;
  t.vocab = 8;
  t.seq_len = 6;
  const auto dir = std::filesystem::temp_directory_path() / "seqmix_harness_test";
  std::filesystem::remove_all(dir);
  TinyModel trained;
  const auto a = train(c, t, dir, &trained);
  const auto b = train(c, t);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].train_loss, b.curve[i].train_loss);
  EXPECT_TRUE(a.curve[1].eval_loss.has_value());
  EXPECT_FALSE(a.curve[0].eval_loss.has_value());
  for (const char* f : {"config.txt", "loss.csv", "weights.bin"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;

  std::ifstream wf(dir / "weights.bin", std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(wf)), {});
  std::mt19937_64 rng(99);
  auto fresh = init_tiny_model(c, rng);
  deserialize_weights(fresh, bytes);
  auto pa = trained.params(), pb = fresh.params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_weights(fresh, bytes), DimensionError);
  std::filesystem::remove_all(dir);
}

TEST(Training, MismatchedTaskIsConfigError) {
  auto c = small_config("linear");
  SyntheticTask t;
  EXPECT_THROW(train(c, t), ConfigError);
}

TEST(Optimizer, WarmupRampsLinearly) {
  TinyModelConfig c;
  c.total_steps = 200;
  c.lr = 1e-3;
  EXPECT_EQ(c.effective_warmup(), 10u);
  std::mt19937_64 rng(1);
  auto small = small_config("linear");
  auto m = init_tiny_model(small, rng);
  Optimizer opt(c, m);
  EXPECT_DOUBLE_EQ(opt.lr_at(0), 1e-4);
  EXPECT_DOUBLE_EQ(opt.lr_at(9), 1e-3);
  EXPECT_DOUBLE_EQ(opt.lr_at(150), 1e-3);
}
