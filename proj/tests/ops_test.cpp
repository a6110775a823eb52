// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "spci/ops.hpp"
#include "spci/verification/oracle.hpp"
#include "test_util.hpp"

namespace spci {
namespace {

using ops::PoolAxis;
using ops::PoolMode;
using testing::random_conv;
using testing::random_tensor;

TEST(Conv2d, IdentityPointwiseKernelReturnsInput) {
  ConvLayer<float> l(2, 2, 1);
  l.weight.at(0, 0, 0, 0) = 1.0f;
  l.weight.at(1, 1, 0, 0) = 1.0f;
  const auto x = random_tensor<float>({1, 2, 4, 5}, 1);
  EXPECT_EQ(ops::conv2d(x, l), x);
}

TEST(Conv2d, ZeroInputGivesBias) {
  Rng rng(2);
  auto l = random_conv<float>(3, 4, 3, rng);
  const auto y = ops::conv2d(Tensor<float>({2, 3, 5, 5}), l);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(n, o, i, j), l.bias[o]);
}

TEST(Conv2d, MatchesNaiveOracleOn3x3) {
  Rng rng(3);
  const auto x = random_tensor<float>({1, 3, 5, 5}, rng);
  const auto l = random_conv<float>(3, 2, 3, rng);
  EXPECT_LT(verify::max_rel_error(ops::conv2d(x, l), verify::naive_conv_oracle(x, l)), 1e-5);
}

TEST(Conv2d, SamePaddingPreservesSpatialSize) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = std::vector<std::size_t>{1, 3, 7}[trial % 3];
    const Shape s{1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(10), 1 + rng.below(10)};
    const auto l = random_conv<float>(s.c, 2, k, rng);
    const auto y = ops::conv2d(random_tensor<float>(s, rng), l);
    EXPECT_EQ(y.shape(), (Shape{s.n, 2, s.h, s.w}));
  }
}

TEST(Conv2d, LinearWithoutBias) {
  Rng rng(5);
  for (std::size_t k : {1, 3, 7}) {
    auto l = random_conv<double>(3, 4, k, rng);
    l.bias.fill(0.0);
    const auto x = random_tensor<double>({2, 3, 8, 9}, rng);
    const auto z = random_tensor<double>({2, 3, 8, 9}, rng);
    const double a = 0.7, b = -1.3;
    Tensor<double> mix(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * z[i];
    const auto lhs = ops::conv2d(mix, l);
    const auto cx = ops::conv2d(x, l), cz = ops::conv2d(z, l);
    Tensor<double> rhs(lhs.shape());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cz[i];
    double worst = 0.0;
    for (std::size_t i = 0; i < rhs.size(); ++i) {
      worst = std::max(worst, std::abs(lhs[i] - rhs[i]) / std::max(1.0, std::abs(rhs[i])));
    }
    EXPECT_LT(worst, 1e-5) << "k=" << k;
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  ConvLayer<float> l(3, 2, 3);
  try {
    ops::conv2d(Tensor<float>({1, 4, 5, 5}), l);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,4,5,5]"), std::string::npos);
    EXPECT_NE(msg.find("[2,3,3,3]"), std::string::npos);
  }
}

TEST(Conv2d, RejectsEvenKernel) { EXPECT_THROW(ConvLayer<float>(2, 2, 2), ShapeError); }

TEST(Pool, ConstantTensorPoolsToConstant) {
  const Tensor<float> x({2, 3, 4, 5}, 1.75f);
  for (auto mode : {PoolMode::avg, PoolMode::max}) {
    for (auto axis : {PoolAxis::spatial, PoolAxis::channel}) {
      const auto y = ops::pool(x, mode, axis);
      for (float v : y.data()) EXPECT_EQ(v, 1.75f);
    }
  }
}

TEST(Pool, SpatialAverageAndChannelMax) {
  const Tensor<float> x({1, 2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 0});
  const auto avg = ops::pool(x, PoolMode::avg, PoolAxis::spatial);
  EXPECT_EQ(avg.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_FLOAT_EQ(avg[0], 2.5f);
  EXPECT_FLOAT_EQ(avg[1], 0.0f);
  const auto mx = ops::pool(x, PoolMode::max, PoolAxis::channel);
  EXPECT_EQ(mx.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(mx, (Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4})));
}

TEST(Pool, SpatialPoolIgnoresPositionPermutation) {
  Rng rng(6);
  const auto x = random_tensor<float>({2, 3, 5, 4}, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor<float> xp(x.shape());
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 20; ++p) xp[(n * 3 + c) * 20 + p] = x[(n * 3 + c) * 20 + perm[p]];
    EXPECT_EQ(ops::pool(xp, PoolMode::max, PoolAxis::spatial),
              ops::pool(x, PoolMode::max, PoolAxis::spatial));
    EXPECT_LT(verify::max_rel_error(ops::pool(xp, PoolMode::avg, PoolAxis::spatial),
                                    ops::pool(x, PoolMode::avg, PoolAxis::spatial)),
              1e-6);
  }
}

TEST(Pool, ChannelPoolIgnoresChannelPermutation) {
  Rng rng(7);
  const auto x = random_tensor<float>({2, 6, 3, 3}, rng);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  Tensor<float> xp(x.shape());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) xp.at(n, c, i, j) = x.at(n, perm[c], i, j);
  EXPECT_EQ(ops::pool(xp, PoolMode::max, PoolAxis::channel),
            ops::pool(x, PoolMode::max, PoolAxis::channel));
  EXPECT_LT(verify::max_rel_error(ops::pool(xp, PoolMode::avg, PoolAxis::channel),
                                  ops::pool(x, PoolMode::avg, PoolAxis::channel)),
            1e-6);
}

TEST(Pointwise, SigmoidBasics) {
  EXPECT_EQ(ops::sigmoid_scalar(0.0f), 0.5f);
  Rng rng(8);
  const auto x = random_tensor<float>({1, 4, 6, 6}, rng, 5.0);
  Tensor<float> neg(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  const auto a = ops::sigmoid(x), b = ops::sigmoid(neg);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i] + b[i], 1.0f, 1e-6);
}

TEST(Pointwise, SigmoidStaysInsideOpenUnitInterval) {
  for (float t : {-1e30f, -1e3f, -100.0f, -40.0f, 40.0f, 100.0f, 1e3f, 1e30f}) {
    const float s = ops::sigmoid_scalar(t);
    EXPECT_GT(s, 0.0f) << t;
    EXPECT_LT(s, 1.0f) << t;
  }
  for (double t : {-1e6, -800.0, 800.0, 1e6}) {
    const double s = ops::sigmoid_scalar(t);
    EXPECT_GT(s, 0.0) << t;
    EXPECT_LT(s, 1.0) << t;
  }
}

TEST(Pointwise, ReluZeroesNegatives) {
  const Tensor<float> x({1, 2, 2, 2}, {-1, -2, -0.5f, -3, -1e-9f, -4, -5, -6});
  const auto y = ops::relu(x);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

// Direct per-channel mean/variance in double.
Tensor<double> bn_train_oracle(const Tensor<float>& x, const BatchNormLayer<float>& bn) {
  Tensor<double> y(x.shape());
  const std::size_t N = x.n(), C = x.c(), HW = x.plane();
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0, q = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) s += x[(n * C + c) * HW + i];
    const double m = s / double(N * HW);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) q += std::pow(x[(n * C + c) * HW + i] - m, 2);
    const double v = q / double(N * HW);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        y[idx] = bn.gamma[c] * (x[idx] - m) / std::sqrt(v + bn.eps) + bn.beta[c];
      }
  }
  return y;
}

TEST(BatchNorm, EvalWithIdentityStatsIsNearIdentity) {
  BatchNormLayer<float> bn(3);
  const auto x = random_tensor<float>({2, 3, 4, 4}, 9);
  const auto y = ops::batchnorm(x, bn, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LE(std::abs(y[i] - x[i]), 1e-5 * std::abs(x[i]) + 1e-7);
  }
}

TEST(BatchNorm, TrainStandardizesPerChannel) {
  BatchNormLayer<float> bn(3);
  const auto x = random_tensor<float>({2, 3, 4, 4}, 10, 3.0);
  const auto y = ops::batchnorm(x, bn, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, q = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) s += y[(n * 3 + c) * 16 + i];
    const double m = s / 32;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) q += std::pow(y[(n * 3 + c) * 16 + i] - m, 2);
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(q / 32, 1.0, 1e-3);
  }
}

TEST(BatchNorm, TrainMatchesDirectFormulaAndUpdatesRunningStats) {
  Rng rng(11);
  BatchNormLayer<float> bn(3);
  testing::randomize_bn(bn, rng);
  const BatchNormLayer<float> before = bn;
  const auto x = random_tensor<float>({2, 3, 4, 4}, rng);
  const auto y = ops::batchnorm(x, bn, Mode::train);
  EXPECT_LT(verify::max_rel_error(y, bn_train_oracle(x, before)), 1e-5);

  // running = (1-m) running + m * batch stat (unbiased variance)
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, q = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) s += x[(n * 3 + c) * 16 + i];
    const double m = s / 32;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) q += std::pow(x[(n * 3 + c) * 16 + i] - m, 2);
    EXPECT_NEAR(bn.running_mean[c], 0.9 * before.running_mean[c] + 0.1 * m, 1e-6);
    EXPECT_NEAR(bn.running_var[c], 0.9 * before.running_var[c] + 0.1 * q / 31, 1e-6);
    EXPECT_GT(bn.running_var[c], 0.0f);
  }
}

TEST(BatchNorm, ConstantChannelDoesNotDivideByZero) {
  BatchNormLayer<float> bn(1);
  const auto y = ops::batchnorm(Tensor<float>({1, 1, 3, 3}, 4.0f), bn, Mode::train);
  EXPECT_TRUE(y.all_finite());
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, TrainRejectsSingleValuePerChannel) {
  BatchNormLayer<float> bn(2);
  EXPECT_THROW(ops::batchnorm(Tensor<float>({1, 2, 1, 1}), bn, Mode::train), ShapeError);
  EXPECT_NO_THROW(ops::batchnorm(Tensor<float>({1, 2, 1, 1}), bn, Mode::eval));
  EXPECT_THROW(ops::batchnorm(Tensor<float>({1, 3, 2, 2}), bn, Mode::eval), ShapeError);
}

TEST(Concat, PreservesOrderAndIndexing) {
  Rng rng(12);
  const auto a = random_tensor<float>({2, 3, 4, 5}, rng);
  const auto b = random_tensor<float>({2, 2, 4, 5}, rng);
  const auto y = ops::concat_channel(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 5, 4, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t c = 0; c < 3; ++c)
          EXPECT_EQ(y[((n * 5 + c) * 4 + i) * 5 + j], a.at(n, c, i, j));
        for (std::size_t c = 0; c < 2; ++c)
          EXPECT_EQ(y[((n * 5 + 3 + c) * 4 + i) * 5 + j], b.at(n, c, i, j));
      }
}

TEST(Concat, WithZerosThenSelectingConvRecoversInput) {
  const auto x = random_tensor<float>({1, 1, 3, 3}, 13);
  ConvLayer<float> pick(2, 1, 1);
  pick.weight[0] = 1.0f;
  EXPECT_EQ(ops::conv2d(ops::concat_channel(x, Tensor<float>::zeros_like(x)), pick), x);
  EXPECT_THROW(ops::concat_channel(x, Tensor<float>({1, 1, 3, 4})), ShapeError);
}

TEST(MulBroadcast, IdentityAnnihilationAndChannelScale) {
  const auto x = random_tensor<float>({1, 2, 3, 3}, 14);
  EXPECT_EQ(ops::mul_broadcast(x, Tensor<float>(x.shape(), 1.0f)), x);
  const auto zero = ops::mul_broadcast(x, Tensor<float>({1, 1, 3, 3}));
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
  const auto y = ops::mul_broadcast(x, Tensor<float>({1, 2, 1, 1}, {0.5f, 2.0f}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(y.at(0, 0, i, j), x.at(0, 0, i, j) * 0.5f);
      EXPECT_EQ(y.at(0, 1, i, j), x.at(0, 1, i, j) * 2.0f);
    }
  EXPECT_THROW(ops::mul_broadcast(x, Tensor<float>({1, 2, 3, 1})), ShapeError);
}

TEST(Add, IdentityInverseAndScalarLoop) {
  Rng rng(15);
  const auto a = random_tensor<double>({2, 3, 4, 4}, rng);
  const auto b = random_tensor<double>({2, 3, 4, 4}, rng);
  const auto c = random_tensor<double>({2, 3, 4, 4}, rng);
  const Tensor<double> z(a.shape());
  EXPECT_EQ(ops::add(a, z, z), a);
  Tensor<double> neg(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
  EXPECT_EQ(ops::add(a, neg, a), a);
  const auto s = ops::add(a, b, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(s[i], a[i] + b[i] + c[i]);
  EXPECT_THROW(ops::add(a, b, Tensor<double>({2, 3, 4, 5})), ShapeError);
}

TEST(Dropout, EvalAndZeroRateAreIdentity) {
  const auto x = random_tensor<float>({1, 3, 5, 5}, 16);
  EXPECT_EQ(ops::dropout(x, 0.7, Mode::eval, 1), x);
  EXPECT_EQ(ops::dropout(x, 0.0, Mode::train, 1), x);
  EXPECT_THROW(ops::dropout(x, 1.0, Mode::train, 1), ConfigError);
}

TEST(Dropout, ZeroedFractionWithinBinomialBound) {
  // 99.9% two-sided binomial interval for n = 10^4, p = 0.5 is [4835, 5165].
  const Tensor<float> x({1, 1, 100, 100}, 1.0f);
  const auto y = ops::dropout(x, 0.5, Mode::train, 12345);
  const auto zeroed = std::count(y.data().begin(), y.data().end(), 0.0f);
  EXPECT_GE(zeroed, 4835);
  EXPECT_LE(zeroed, 5165);
  for (float v : y.data()) EXPECT_TRUE(v == 0.0f || v == 2.0f);
  EXPECT_EQ(y, ops::dropout(x, 0.5, Mode::train, 12345));
  EXPECT_NE(y, ops::dropout(x, 0.5, Mode::train, 12346));
}

TEST(Tensor, RejectsBadConstruction) {
  EXPECT_THROW(Tensor<float>({1, 0, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>({1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Subsample2, MatchesStridedConvolution) {
  Rng rng(17);
  const auto x = random_tensor<double>({1, 2, 8, 8}, rng);
  const auto l = random_conv<double>(2, 3, 3, rng);
  const auto y = ops::subsample2(ops::conv2d(x, l));
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  // Direct stride-2, pad-1 definition.
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = l.bias[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              const int r = 2 * int(i) + u - 1, q = 2 * int(j) + v - 1;
              if (r >= 0 && q >= 0 && r < 8 && q < 8) s += l.weight.at(o, c, u, v) * x.at(0, c, r, q);
            }
        EXPECT_NEAR(y.at(0, o, i, j), s, 1e-12);
      }
}

}  // namespace
}  // namespace spci
