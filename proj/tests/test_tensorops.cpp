#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqmix/ops.hpp"

using namespace seqmix;

namespace {

// Oracles: textbook loops with no shared code paths.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

std::vector<double> cumsum_oracle(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = acc += x[i];
  return out;
}

Tensor<double> conv_oracle(const Tensor<double>& x, const ConvSpec<double>& spec) {
  Tensor<double> out(x.shape());
  for (std::size_t t = 0; t < x.dim(0); ++t)
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      double s = spec.bias ? (*spec.bias)[c] : 0.0;
      for (std::size_t k = 0; k < spec.window; ++k)
        if (t >= k) s += spec.weight(c, k) * x(t - k, c);
      out(t, c) = spec.activation == ConvActivation::silu ? s / (1.0 + std::exp(-s)) : s;
    }
  return out;
}

Tensor<double> randn(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor<double> t(std::move(s));
  for (auto& x : t.data()) x = nd(rng);
  return t;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentsAndBadData) {
  EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<double>::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, NonFiniteIsAnError) {
  auto t = Tensor<double>::vector({1.0, std::nan("")});
  EXPECT_THROW(require_finite(t, "test"), NonFiniteError);
  EXPECT_THROW(softplus(Tensor<double>::vector({std::numeric_limits<double>::infinity()})),
               NonFiniteError);
}

TEST(Matmul, IdentityAndSmallCase) {
  const auto a = Tensor<double>::matrix({{2, 3}, {5, 7}});
  EXPECT_EQ(matmul(Tensor<double>::matrix({{1, 0}, {0, 1}}), a), a);
  const auto c = matmul(Tensor<double>::matrix({{1, 2}}), Tensor<double>::matrix({{3}, {4}}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    const auto a = randn({3, 4}, rng), b = randn({4, 2}, rng);
    EXPECT_LT(relative_error(matmul(a, b), matmul_oracle(a, b)), 1e-15);
  }
}

TEST(Matmul, BroadcastsLeadingAxes) {
  std::mt19937_64 rng(2);
  const auto a = randn({3, 2, 4}, rng), b = randn({4, 5}, rng);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor<double> ai({2, 4});
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t k = 0; k < 4; ++k) ai(r, k) = a(i, r, k);
    const auto ref = matmul_oracle(ai, b);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(c(i, r, j), ref(r, j));
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
  EXPECT_THROW(matmul(Tensor<double>({2, 2, 3}), Tensor<double>({3, 3, 1})), DimensionError);
}

TEST(Matmul, AssociativityAtDoublePrecision) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = randn({8, 8}, rng), b = randn({8, 8}, rng), c = randn({8, 8}, rng);
    const auto left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    EXPECT_LT(max_abs_diff(left, right) / max_abs(right), 1e-12);
  }
}

TEST(Cumsum, SmallCases) {
  EXPECT_EQ(cumsum_axis(Tensor<double>::vector({1, 2, 3}), 0), Tensor<double>::vector({1, 3, 6}));
  EXPECT_EQ(cumsum_axis(Tensor<double>({5}), 0), Tensor<double>({5}));
  EXPECT_THROW(cumsum_axis(Tensor<double>({5}), 1), DimensionError);
}

TEST(Cumsum, MatchesScalarLoopExactly) {
  std::mt19937_64 rng(4);
  const auto x = randn({16}, rng);
  const auto ref = cumsum_oracle(x.values());
  const auto got = cumsum_axis(x, 0);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(got[i], ref[i]);
}

TEST(Cumsum, InnerAxisOfMatrix) {
  const auto x = Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_EQ(cumsum_axis(x, 0), Tensor<double>::matrix({{1, 2}, {4, 6}, {9, 12}}));
  EXPECT_EQ(cumsum_axis(x, 1), Tensor<double>::matrix({{1, 3}, {3, 7}, {5, 11}}));
}

TEST(Cumsum, DifferencingRecoversIntegerInput) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> ui(-1000, 1000);
  Tensor<double> x({1024});
  for (auto& v : x.data()) v = ui(rng);
  const auto c = cumsum_axis(x, 0);
  EXPECT_EQ(c[0], x[0]);
  for (std::size_t i = 1; i < 1024; ++i) EXPECT_EQ(c[i] - c[i - 1], x[i]);
}

TEST(Cumsum, ReverseIsAdjoint) {
  std::mt19937_64 rng(6);
  const auto x = randn({2, 9}, rng), y = randn({2, 9}, rng);
  const auto cx = cumsum_axis(x, 1), ry = reverse_cumsum_last(y);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lhs += cx[i] * y[i];
    rhs += x[i] * ry[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-12 * std::abs(lhs) + 1e-12);
}

TEST(Softplus, FrozenValues) {
  EXPECT_DOUBLE_EQ(softplus(0.0), 0.6931471805599453);
  EXPECT_EQ(softplus(100.0), 100.0);
  EXPECT_EQ(softplus(-100.0), std::exp(-100.0));
}

TEST(Softplus, MonotoneAndAboveRelu) {
  double prev = -1.0;
  for (double x = -40.0; x <= 40.0; x += 0.01) {
    const double s = softplus(x);
    EXPECT_GE(s, std::max(x, 0.0));
    EXPECT_GE(s, prev);
    prev = s;
  }
}

TEST(SoftplusInverse, RoundTrips) {
  EXPECT_NEAR(softplus_inverse(std::log(2.0)), 0.0, 1e-12);
  EXPECT_NEAR(softplus(softplus_inverse(0.01)), 0.01, 1e-12);
  EXPECT_NEAR(softplus(softplus_inverse(0.001)), 0.001, 1e-10);
  EXPECT_NEAR(softplus(softplus_inverse(0.1)), 0.1, 1e-10);
}

TEST(SoftplusInverse, DomainError) {
  EXPECT_THROW(softplus_inverse(0.0), DomainError);
  EXPECT_THROW(softplus_inverse(-1.0), DomainError);
}

TEST(Nonlinearities, SigmoidSiluGrad) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-800.0), -1e-300);
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double h = 1e-6;
    EXPECT_NEAR(silu_grad(x), (silu(x + h) - silu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(Conv, IdentityWindowOne) {
  std::mt19937_64 rng(7);
  const auto x = randn({5, 3}, rng);
  EXPECT_EQ(causal_conv1d(x, ConvSpec<double>::identity(3, 1)), x);
}

TEST(Conv, WindowTwoOnes) {
  ConvSpec<double> spec = ConvSpec<double>::identity(1, 2);
  spec.weight(0, 1) = 1.0;
  const auto out = causal_conv1d(Tensor<double>({3, 1}, std::vector<double>{2, 3, 5}), spec);
  EXPECT_EQ(out.values(), (std::vector<double>{2, 5, 8}));
}

TEST(Conv, MatchesLoopOracleWindowFour) {
  std::mt19937_64 rng(8);
  ConvSpec<double> spec{4, randn({6, 4}, rng), randn({6}, rng), ConvActivation::silu};
  const auto x = randn({11, 6}, rng);
  EXPECT_LT(relative_error(causal_conv1d(x, spec), conv_oracle(x, spec)), 1e-15);
  spec.activation = ConvActivation::none;
  spec.bias.reset();
  EXPECT_LT(relative_error(causal_conv1d(x, spec), conv_oracle(x, spec)), 1e-15);
}

TEST(Conv, Causality) {
  std::mt19937_64 rng(9);
  for (std::size_t w = 1; w <= 4; ++w) {
    ConvSpec<double> spec{w, randn({2, w}, rng), std::nullopt, ConvActivation::silu};
    const auto x = randn({8, 2}, rng);
    const auto base = causal_conv1d(x, spec);
    for (std::size_t t = 0; t < 8; ++t) {
      auto y = x;
      y(t, 0) += 1.0;
      y(t, 1) -= 2.0;
      const auto out = causal_conv1d(y, spec);
      for (std::size_t s = 0; s < t; ++s)
        for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out(s, c), base(s, c));
    }
  }
}

TEST(Conv, InvalidSpec) {
  EXPECT_THROW(ConvSpec<double>::identity(2, 5).validate(), DimensionError);
  EXPECT_THROW(causal_conv1d(Tensor<double>({3, 4}), ConvSpec<double>::identity(3, 2)),
               DimensionError);
}

TEST(RmsNorm, UnitRmsWithUnitGain) {
  std::mt19937_64 rng(10);
  const auto x = randn({4, 6}, rng);
  const auto y = rms_norm(x, Tensor<double>({6}, 1.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double ms = 0;
    for (auto v : y.row(r)) ms += v * v;
    EXPECT_NEAR(ms / 6.0, 1.0, 1e-5);
  }
}
