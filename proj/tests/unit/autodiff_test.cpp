#include <gtest/gtest.h>

#include <cmath>

#include "clickrefine/engine/autodiff.hpp"
#include "clickrefine/engine/params.hpp"
#include "test_util.hpp"

namespace clickrefine {
namespace {

using testing::random_array;
using V = Var<double>;

// Weighted sum against a fixed random probe makes every output element matter.
V probe(Tape<double>& t, V x, std::uint64_t seed = 99) {
  return ad::sum(ad::mul(x, t.constant(random_array<double>(x.shape(), seed))));
}

double check(const ScalarFn& f, const ParamSet64& params) {
  const GradCheckReport r = grad_check(f, params);
  // Entries whose true gradient is zero (a key bias under softmax) only carry FD noise.
  for (const auto& e : r.entries) {
    EXPECT_TRUE(e.max_rel_error < 1e-6 || e.max_abs_error < 1e-9) << e.name;
    EXPECT_EQ(e.nonsmooth, 0u) << e.name;
  }
  return r.max_rel_error;
}

TEST(GradCheck, Quadratic) {
  ParamSet64 p;
  p.add("theta", Array64::scalar(3.0), true);
  Tape<double> tape;
  ParamVars<double> vars(tape, p);
  const V y = ad::mul(vars("theta"), vars("theta"));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(vars("theta"))[0], 6.0);
  const double err =
      grad_check([](Tape<double>&, const ParamVars<double>& v) { return ad::mul(v("theta"), v("theta")); }, p)
          .max_rel_error;
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, LayerNormGain) {
  ParamSet64 p;
  p.add("x", random_array<double>({3, 6}, 1), false);
  p.add("gain", random_array<double>({6}, 2, 0.5, 1.5), true);
  p.add("shift", random_array<double>({6}, 3), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          return probe(t, ad::layer_norm(v("x"), v("gain"), v("shift"), 1));
        },
        p);
}

TEST(GradCheck, LayerNormInputOnChannelAxis) {
  ParamSet64 p;
  p.add("x", random_array<double>({1, 4, 3, 3}, 4), true);
  p.add("gain", random_array<double>({4}, 5), true);
  p.add("shift", random_array<double>({4}, 6), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          return probe(t, ad::layer_norm(v("x"), v("gain"), v("shift"), 1));
        },
        p);
}

TEST(GradCheck, LinearAndElementwise) {
  ParamSet64 p;
  p.add("x", random_array<double>({4, 3}, 7), true);
  p.add("w", random_array<double>({3, 5}, 8), true);
  p.add("b", random_array<double>({5}, 9), true);
  p.add("s", Array64::scalar(0.7), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          const V y = ad::linear(v("x"), v("w"), ad::OptVar<double>(v("b")));
          const V z = ad::sub(ad::mul(ad::gelu(y), ad::sigmoid(y)), ad::affine(y, 0.3, 1.0));
          return probe(t, ad::add(ad::mul_scalar(z, v("s")), ad::slice_columns(ad::concat_axis1(y, y), 2, 7)));
        },
        p);
}

TEST(GradCheck, ConvolutionsWithStrideAndGroups) {
  ParamSet64 p;
  p.add("x", random_array<double>({1, 4, 7, 6}, 10), true);
  p.add("k", random_array<double>({4, 2, 3, 3}, 11), true);
  p.add("b", random_array<double>({4}, 12), true);
  p.add("tk", random_array<double>({4, 3, 2, 2}, 13), true);
  p.add("tb", random_array<double>({3}, 14), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          const V y = ad::conv2d(v("x"), v("k"), ad::OptVar<double>(v("b")), {2, 1, 2});
          return probe(t, ad::transposed_conv2d(y, v("tk"), 2, ad::OptVar<double>(v("tb"))));
        },
        p);
}

TEST(GradCheck, DeformableConvIncludingOffsets) {
  ParamSet64 p;
  p.add("x", random_array<double>({1, 2, 6, 5}, 15), true);
  p.add("k", random_array<double>({3, 2, 3, 3}, 16), true);
  p.add("off", random_array<double>({1, 18, 6, 5}, 17, -0.8, 0.8), true);
  p.add("b", random_array<double>({3}, 18), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          return probe(t, ad::deformable_conv2d(v("x"), v("k"), v("off"), ad::OptVar<double>(v("b")), {1, 1, 1}));
        },
        p);
}

TEST(GradCheck, SamplingKinkInsideStepIsClassified) {
  // Top row 0 1 5 2; the first output samples just right of x = 1, where the
  // bilinear slope jumps. Every other offset sits inside a cell.
  Array64 x({1, 1, 2, 4});
  const double rows[] = {0, 1, 5, 2, 3, 1, 4, 1};
  std::copy(std::begin(rows), std::end(rows), x.values().begin());
  Array64 off({1, 2, 2, 4}, 0.3);
  off[0] = 1.0 + 2e-6;
  ParamSet64 p;
  p.add("off", off, true);
  const auto f = [x](Tape<double>& t, const ParamVars<double>& v) {
    return ad::sum(ad::deformable_conv2d(t.constant(x), t.constant(Array64({1, 1, 1, 1}, 1.0)), v("off"),
                                         ad::OptVar<double>(), {1, 0, 1}));
  };
  const GradCheckReport r = grad_check(f, p);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.entries[0].nonsmooth, 1u);
  EXPECT_LT(r.entries[0].max_rel_error, 1e-6);

  // Same point with a step small enough to stay inside the cell.
  GradCheckOptions fine;
  fine.step = 1e-7;
  const GradCheckReport smooth = grad_check(f, p, fine);
  EXPECT_EQ(smooth.entries[0].nonsmooth, 0u);
  EXPECT_LT(smooth.entries[0].max_abs_error, 1e-7);
}

TEST(GradCheck, PoolingResizeAndChannelScale) {
  ParamSet64 p;
  p.add("x", random_array<double>({1, 3, 4, 4}, 19), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          const V pooled = ad::avg_pool2d(v("x"), 2);
          const V up = ad::resize_bilinear(pooled, 5, 7);
          const V gate = ad::sigmoid(ad::global_avg_pool(v("x")));
          const V scaled = ad::scale_channels(v("x"), gate);
          const V tokens = ad::map_to_tokens(scaled);
          const V back = ad::tokens_to_map(tokens, 4, 4);
          return ad::add(probe(t, up, 1), ad::add(probe(t, back, 2), ad::mean(ad::reshape(scaled, {48}))));
        },
        p);
}

TEST(GradCheck, MultiHeadAttention) {
  ParamSet64 p;
  const std::size_t d = 6;
  p.add("q", random_array<double>({3, d}, 20), true);
  p.add("kv", random_array<double>({5, d}, 21), true);
  for (const char* n : {"wq", "wk", "wv", "wo"}) p.add(n, random_array<double>({d, d}, 22 + n[1]), true);
  for (const char* n : {"bq", "bk", "bv", "bo"}) p.add(n, random_array<double>({d}, 40 + n[1]), true);
  check([](Tape<double>& t, const ParamVars<double>& v) {
          const ad::AttentionVars<double> a{v("wq"), v("bq"), v("wk"), v("bk"), v("wv"), v("bv"), v("wo"), v("bo")};
          return probe(t, ad::multi_head_attention(v("q"), v("kv"), v("kv"), 2, a));
        },
        p);
}

TEST(Tape, NonFiniteValueIsNumericError) {
  Tape<double> tape;
  EXPECT_THROW(tape.constant(Array64::scalar(std::nan(""))), NumericError);
}

TEST(Tape, RecordsAttentionProbabilities) {
  Tape<float> tape;
  tape.set_record_attention(true);
  const auto q = tape.constant(random_array<float>({2, 4}, 1));
  ad::attention(q, q, q, 2);
  ASSERT_EQ(tape.attention_log().size(), 1u);
  EXPECT_EQ(tape.attention_log()[0].shape(), (Shape{2, 2, 2}));
}

TEST(ParamSet, DuplicateNamesRejectedAndChecksumsSplit) {
  ParamSet p;
  p.add("a", Array({2}, 1.0f), true);
  p.add("b", Array({2}, 2.0f), false);
  EXPECT_THROW(p.add("a", Array({1}), false), ValidationError);
  const auto frozen = p.checksum(ParamSet::Subset::frozen);
  p.get("a")[0] = 5.0f;
  EXPECT_EQ(p.checksum(ParamSet::Subset::frozen), frozen);
  p.get("b")[0] = 5.0f;
  EXPECT_NE(p.checksum(ParamSet::Subset::frozen), frozen);
  EXPECT_EQ(p.trainable_scalars(), 2u);
}

}  // namespace
}  // namespace clickrefine
