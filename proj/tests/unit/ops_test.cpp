#include <gtest/gtest.h>

#include <cmath>

#include "clickrefine/engine/ops.hpp"
#include "test_util.hpp"

namespace clickrefine {
namespace {

using testing::max_abs_diff;
using testing::random_array;

template <typename T>
BasicArray<T> brute_conv(const BasicArray<T>& x, const BasicArray<T>& k, const BasicArray<T>& bias,
                         std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  BasicArray<T> out({n, o, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double s = bias[oc];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long sy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long sx = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                s += static_cast<double>(x.at(b, ic, sy, sx)) * k.at(oc, ic, i, j);
              }
          out.at(b, oc, y, xx) = static_cast<T>(s);
        }
  return out;
}

TEST(Conv2d, IdentityKernel) {
  const auto x = random_array<float>({1, 1, 6, 7}, 3);
  const Array k({1, 1, 1, 1}, 1.0f);
  const Array b({1}, 0.0f);
  EXPECT_EQ(ops::conv2d(x, k, &b), x);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  const auto x = random_array<float>({1, 2, 5, 5}, 4);
  const Array k({3, 2, 3, 3}, 0.0f);
  const Array b({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  const Array out = ops::conv2d(x, k, &b, {1, 1, 1});
  for (std::size_t oc = 0; oc < 3; ++oc)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(out[oc * 25 + i], b[oc]);
}

TEST(Conv2d, MatchesBruteForceOracle) {
  const auto x = random_array<float>({1, 1, 5, 5}, 5);
  const auto k = random_array<float>({1, 1, 3, 3}, 6);
  const Array b({1}, 0.25f);
  EXPECT_LE(max_abs_diff(ops::conv2d(x, k, &b), brute_conv(x, k, b, 1, 0)), 1e-6);
}

TEST(Conv2d, RandomShapesUpTo16MatchOracle) {
  std::uint64_t seed = 100;
  for (std::size_t h : {3u, 7u, 12u, 16u}) {
    for (std::size_t stride : {1u, 2u}) {
      for (std::size_t pad : {0u, 1u}) {
        const auto x = random_array<float>({1, 3, h, h + 1}, seed++);
        const auto k = random_array<float>({4, 3, 3, 3}, seed++);
        const auto b = random_array<float>({4}, seed++);
        const Array got = ops::conv2d(x, k, &b, {stride, pad, 1});
        EXPECT_LE(max_abs_diff(got, brute_conv(x, k, b, stride, pad)), 1e-5);
      }
    }
  }
}

TEST(Conv2d, OutputSizeFormula) {
  EXPECT_EQ(ops::conv_output_size(16, 3, 2, 1), 8u);
  EXPECT_EQ(ops::conv_output_size(5, 3, 1, 0), 3u);
}

TEST(Conv2d, ShapeMismatchThrows) {
  const Array x({1, 2, 4, 4});
  const Array k({1, 3, 3, 3});
  EXPECT_THROW(ops::conv2d<float>(x, k, nullptr), DimensionError);
  const Array big({1, 2, 7, 7});
  const Array k2({1, 2, 7, 7});
  EXPECT_THROW(ops::conv2d<float>(x, k2, nullptr), DimensionError);
  (void)big;
}

TEST(Conv2d, DepthwiseGroupsMatchPerChannelOracle) {
  const auto x = random_array<double>({1, 3, 6, 6}, 9);
  const auto k = random_array<double>({3, 1, 3, 3}, 10);
  const Array64 out = ops::conv2d<double>(x, k, nullptr, {1, 1, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    Array64 xc({1, 1, 6, 6}), kc({1, 1, 3, 3});
    for (std::size_t i = 0; i < 36; ++i) xc[i] = x[c * 36 + i];
    for (std::size_t i = 0; i < 9; ++i) kc[i] = k[c * 9 + i];
    const Array64 ref = brute_conv(xc, kc, Array64({1}, 0.0), 1, 1);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(out[c * 36 + i], ref[i], 1e-12);
  }
}

TEST(DeformableConv, ZeroOffsetsBitwiseEqualConv64) {
  const auto x = random_array<double>({1, 3, 9, 8}, 11);
  const auto k = random_array<double>({5, 3, 3, 3}, 12);
  const auto b = random_array<double>({5}, 13);
  for (std::size_t stride : {1u, 2u}) {
    const ops::Conv2dSpec spec{stride, 1, 1};
    const std::size_t ho = ops::conv_output_size(9, 3, stride, 1), wo = ops::conv_output_size(8, 3, stride, 1);
    const Array64 offsets({1, 18, ho, wo}, 0.0);
    EXPECT_EQ(ops::deformable_conv2d(x, k, offsets, &b, spec), ops::conv2d(x, k, &b, spec));
  }
}

TEST(DeformableConv, IntegerShiftMatchesShiftedConvOnInterior) {
  const std::size_t h = 10, w = 10;
  const auto x = random_array<double>({1, 2, h, w}, 14);
  const auto k = random_array<double>({3, 2, 3, 3}, 15);
  Array64 offsets({1, 18, h, w}, 0.0);
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t i = 0; i < h * w; ++i) offsets[(2 * t) * h * w + i] = 1.0;  // dx = +1
  Array64 shifted({1, 2, h, w}, 0.0);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx + 1 < w; ++xx) shifted.at(0, c, y, xx) = x.at(0, c, y, xx + 1);
  const Array64 got = ops::deformable_conv2d<double>(x, k, offsets, nullptr, {1, 1, 1});
  const Array64 ref = ops::conv2d<double>(shifted, k, nullptr, {1, 1, 1});
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t y = 1; y + 1 < h; ++y)
      for (std::size_t xx = 1; xx + 2 < w; ++xx) EXPECT_NEAR(got.at(0, o, y, xx), ref.at(0, o, y, xx), 1e-12);
}

TEST(DeformableConv, HalfPixelOffsetSamplesMidpoint) {
  Array64 x({1, 1, 1, 2}, std::vector<double>{2.0, 6.0});
  const Array64 k({1, 1, 1, 1}, 1.0);
  Array64 offsets({1, 2, 1, 2}, 0.0);
  offsets.at(0, 0, 0, 0) = 0.5;
  const Array64 out = ops::deformable_conv2d<double>(x, k, offsets, nullptr);
  EXPECT_DOUBLE_EQ(out[0], 4.0);
  EXPECT_DOUBLE_EQ(out[1], 6.0);
}

TEST(DeformableConv, WrongOffsetChannelsThrow) {
  const Array x({1, 1, 5, 5});
  const Array k({1, 1, 3, 3});
  const Array offsets({1, 9, 3, 3});
  EXPECT_THROW(ops::deformable_conv2d<float>(x, k, offsets, nullptr), DimensionError);
}

TEST(DeformableConv, OutOfBoundsSamplesReadZero) {
  const Array64 x({1, 1, 2, 2}, 1.0);
  const Array64 k({1, 1, 1, 1}, 1.0);
  Array64 offsets({1, 2, 2, 2}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) offsets[i] = 10.0;
  const Array64 out = ops::deformable_conv2d<double>(x, k, offsets, nullptr);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(TransposedConv, UnitKernelStrideOneIsIdentity) {
  const auto x = random_array<float>({1, 1, 4, 5}, 16);
  const Array k({1, 1, 1, 1}, 1.0f);
  EXPECT_EQ(ops::transposed_conv2d(x, k, 1), x);
}

TEST(TransposedConv, AdjointIdentity) {
  std::uint64_t seed = 200;
  for (std::size_t h : {4u, 9u, 16u}) {
    for (std::size_t stride : {1u, 2u, 3u}) {
      const auto x = random_array<double>({1, 3, h, h}, seed++);
      const auto k = random_array<double>({2, 3, 3, 3}, seed++);
      const Array64 cx = ops::conv2d<double>(x, k, nullptr, {stride, 0, 1});
      const auto y = random_array<double>(cx.shape(), seed++);
      const Array64 ty = ops::transposed_conv2d(y, k, stride);
      ASSERT_EQ(ty.dim(2) <= h, true);
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < ty.dim(2); ++r)
          for (std::size_t q = 0; q < ty.dim(3); ++q) rhs += x.at(0, c, r, q) * ty.at(0, c, r, q);
      EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST(TransposedConv, StrideTwoMassBookkeeping) {
  const Array64 x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Array64 k({1, 1, 2, 2}, 1.0);
  const Array64 out = ops::transposed_conv2d(x, k, 2);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  double s = 0;
  for (double v : out.values()) s += v;
  EXPECT_DOUBLE_EQ(s, 4.0 * 10.0);
  EXPECT_EQ(out.at(0, 0, 3, 3), 4.0);
}

TEST(LayerNorm, ConstantVectorIsZero) {
  const Array x({1, 4}, 3.0f);
  const Array g({4}, 1.0f), s({4}, 0.0f);
  const Array out = ops::layer_norm(x, g, s, 1);
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, PlusMinusOne) {
  const Array64 x({1, 2}, std::vector<double>{1, -1});
  const Array64 g({2}, 1.0), s({2}, 0.0);
  const Array64 out = ops::layer_norm(x, g, s, 1);
  EXPECT_NEAR(out[0], 1.0, 1e-6);
  EXPECT_NEAR(out[1], -1.0, 1e-6);
}

TEST(LayerNorm, RandomVectorStatistics) {
  const auto x = random_array<double>({1, 64}, 17, -5, 5);
  const Array64 g({64}, 1.0), s({64}, 0.0);
  const Array64 out = ops::layer_norm(x, g, s, 1);
  double mean = 0, var = 0;
  for (double v : out.values()) mean += v;
  mean /= 64;
  for (double v : out.values()) var += (v - mean) * (v - mean);
  var /= 64;
  EXPECT_LT(std::abs(mean), 1e-6);
  EXPECT_NEAR(var, 1.0, 1e-4);
}

TEST(LayerNorm, ChannelAxisOfFeatureMap) {
  const auto x = random_array<double>({1, 5, 3, 4}, 18);
  const Array64 g({5}, 1.0), s({5}, 0.0);
  const Array64 out = ops::layer_norm(x, g, s, 1);
  for (std::size_t p = 0; p < 12; ++p) {
    double mean = 0;
    for (std::size_t c = 0; c < 5; ++c) mean += out[c * 12 + p];
    EXPECT_NEAR(mean / 5, 0.0, 1e-9);
  }
}

template <typename T>
BasicArray<T> brute_attention(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                              std::size_t heads) {
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1), dh = d / heads;
  BasicArray<T> out({lq, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> logits(lk);
      double mx = -1e300;
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < lk; ++j) s += logits[j] / z * v.at(j, h * dh + c);
        out.at(i, h * dh + c) = static_cast<T>(s);
      }
    }
  return out;
}

TEST(Attention, SingleKeyReturnsValue) {
  const auto x = random_array<float>({1, 8}, 19);
  EXPECT_LE(max_abs_diff(ops::attention_core<float>(x, x, x, 2, nullptr), x), 1e-7);
}

TEST(Attention, IdenticalKeysAverageValues) {
  const Array64 q({1, 2}, std::vector<double>{0.3, -0.2});
  const Array64 k({2, 2}, std::vector<double>{1, 1, 1, 1});
  const Array64 v({2, 2}, std::vector<double>{1, 2, 3, 6});
  const Array64 out = ops::attention_core<double>(q, k, v, 1, nullptr);
  EXPECT_NEAR(out[0], 2.0, 1e-12);
  EXPECT_NEAR(out[1], 4.0, 1e-12);
}

TEST(Attention, MatchesLoopOracle) {
  const auto q = random_array<float>({3, 8}, 20);
  const auto k = random_array<float>({3, 8}, 21);
  const auto v = random_array<float>({3, 8}, 22);
  EXPECT_LE(max_abs_diff(ops::attention_core<float>(q, k, v, 2, nullptr), brute_attention(q, k, v, 2)), 1e-5);
}

TEST(Attention, ProbabilityRowsSumToOne) {
  const auto q = random_array<float>({5, 12}, 23, -3, 3);
  const auto k = random_array<float>({7, 12}, 24, -3, 3);
  const auto v = random_array<float>({7, 12}, 25);
  Array probs;
  ops::attention_core(q, k, v, 3, &probs);
  ASSERT_EQ(probs.shape(), (Shape{3, 5, 7}));
  for (std::size_t r = 0; r < 15; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(probs[r * 7 + j], 0.0f);
      s += probs[r * 7 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Attention, IndivisibleHeadsIsConfigError) {
  const Array q({2, 6});
  EXPECT_THROW(ops::attention_core<float>(q, q, q, 4, nullptr), ConfigError);
}

TEST(Attention, MultiHeadSingleTokenIsValueProjection) {
  const std::size_t d = 4;
  ops::AttentionWeights<double> w{random_array<double>({d, d}, 30), random_array<double>({d}, 31),
                                  random_array<double>({d, d}, 32), random_array<double>({d}, 33),
                                  random_array<double>({d, d}, 34), random_array<double>({d}, 35),
                                  random_array<double>({d, d}, 36), random_array<double>({d}, 37)};
  const auto x = random_array<double>({1, d}, 38);
  const Array64 expected = ops::linear(ops::linear(x, w.wv, &w.bv), w.wo, &w.bo);
  EXPECT_LE(max_abs_diff(ops::multi_head_attention(x, x, x, 2, w), expected), 1e-12);
}

TEST(Resize, IdentityAtSameSize) {
  const auto x = random_array<float>({1, 2, 5, 6}, 40);
  EXPECT_EQ(ops::resize_bilinear(x, 5, 6), x);
}

TEST(Resize, BackwardIsAdjoint) {
  const auto x = random_array<double>({1, 2, 4, 6}, 41);
  const Array64 y = ops::resize_bilinear(x, 9, 5);
  const auto g = random_array<double>(y.shape(), 42);
  Array64 gx(x.shape());
  ops::resize_bilinear_backward(g, x.shape(), gx);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(AvgPool, AveragesBlocks) {
  const Array64 x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 6});
  EXPECT_DOUBLE_EQ(ops::avg_pool2d(x, 2)[0], 3.0);
  EXPECT_THROW(ops::avg_pool2d(Array64({1, 1, 3, 3}), 2), DimensionError);
}

TEST(Layout, TokensRoundTrip) {
  const auto x = random_array<float>({1, 3, 4, 5}, 43);
  const Array t = ops::map_to_tokens(x);
  ASSERT_EQ(t.shape(), (Shape{20, 3}));
  EXPECT_EQ(t.at(7, 2), x.at(0, 2, 1, 2));
  EXPECT_EQ(ops::tokens_to_map(t, 4, 5), x);
}

}  // namespace
}  // namespace clickrefine
