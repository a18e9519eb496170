#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "clickrefine/engine/autodiff.hpp"
#include "clickrefine/engine/ops.hpp"
#include "clickrefine/model/model.hpp"
#include "support/model_fixture.hpp"
#include "test_util.hpp"

using namespace clickrefine;
using clickrefine::testing::random_array;

namespace {

ModelInputs<float> float_inputs(const ModelConfig& c, std::uint64_t seed) {
  const auto in = clickrefine::testing::random_inputs(c, seed);
  return {in.image.cast<float>(), in.prev.cast<float>(), in.mod.cast<float>(), in.clicks};
}

Array run(const ModelConfig& c, const ParamSet& p, const ModelInputs<float>& in, Trace<float>* trace = nullptr) {
  Tape<float> tape;
  ParamVars<float> vars(tape, p, false);
  return forward(c, vars, in, trace).value();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::path(CLICKREFINE_TEST_BINARY_DIR) / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
  EXPECT_NO_THROW(ModelConfig::toy().validate());
  EXPECT_NO_THROW(ModelConfig::gradcheck().validate());
  EXPECT_NO_THROW(ModelConfig::paper_scale().validate());
  ModelConfig bad = ModelConfig::toy();
  bad.patch = 6;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig::toy();
  bad.input_resolution = 60;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKey) {
  ModelConfig c = ModelConfig::toy();
  c.fusion_mode = FusionMode::fixed;
  c.use_hq = false;
  const nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  nlohmann::json extra = j;
  extra["bogus"] = 1;
  EXPECT_THROW(extra.get<ModelConfig>(), ConfigError);
}

TEST(Model, ParamsSplitFrozenAndTrainable) {
  const ParamSet p = init_params(ModelConfig::toy(), 3);
  for (const auto& e : p.entries()) {
    const bool frozen_group = e.name.rfind("bb.", 0) == 0 ||
                              (e.name.rfind("fpn.", 0) == 0 && e.name.find("merge") == std::string::npos) ||
                              e.name.ends_with(".k.b");
    EXPECT_EQ(e.trainable, !frozen_group) << e.name;
  }
  // Frozen weights depend only on the frozen seed.
  EXPECT_EQ(init_params(ModelConfig::toy(), 4).checksum(ParamSet::Subset::frozen), p.checksum(ParamSet::Subset::frozen));
  EXPECT_NE(init_params(ModelConfig::toy(), 4).checksum(ParamSet::Subset::trainable),
            p.checksum(ParamSet::Subset::trainable));
}

TEST(Model, ForwardShapeAndDeterminism) {
  const ModelConfig c = ModelConfig::toy();
  const ParamSet p = init_params(c, 1);
  const auto in = float_inputs(c, 5);
  const Array a = run(c, p, in);
  const Array b = run(c, p, in);
  ASSERT_EQ(a.shape(), (Shape{1, 1, 64, 64}));
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
  for (float v : a.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, PredictShapesAcrossResolutions) {
  Model m{ModelConfig::toy(), init_params(ModelConfig::toy(), 1)};
  const std::uint64_t frozen = m.params.checksum(ParamSet::Subset::frozen);
  for (std::size_t r : {32u, 64u, 96u}) {
    const Array image = random_array<float>({1, 3, r, r}, r, 0.0, 1.0);
    const Array zeros({r, r}, 0.0f);
    const std::vector<Click> clicks{{static_cast<int>(r / 2), static_cast<int>(r / 3), ClickKind::positive, 1}};
    const Array prob = predict(m, image, zeros, zeros, clicks);
    ASSERT_EQ(prob.shape(), (Shape{r, r}));
    for (float v : prob.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_EQ(m.params.checksum(ParamSet::Subset::frozen), frozen);
}

TEST(Model, PredictRejectsBadInputs) {
  Model m{ModelConfig::toy(), init_params(ModelConfig::toy(), 1)};
  const Array image({1, 3, 64, 64}, 0.5f);
  const Array zeros({64, 64}, 0.0f);
  EXPECT_THROW(predict(m, image, Array({32, 32}, 0.0f), zeros, {}), DimensionError);
  EXPECT_THROW(predict(m, image, zeros, zeros, {{64, 0, ClickKind::positive, 1}}), ValidationError);
  EXPECT_THROW(predict(m, Array({1, 1, 64, 64}, 0.0f), zeros, zeros, {}), DimensionError);
}

TEST(Model, BuildAuxChannels) {
  const ModelConfig c = ModelConfig::toy();
  const Array prev = random_array<float>({64, 64}, 1, 0.0, 1.0);
  const Array mod = random_array<float>({64, 64}, 2, 0.0, 1.0);
  const Array aux = build_aux(c, prev, mod, {{10, 12, ClickKind::negative, 1}});
  ASSERT_EQ(aux.shape(), (Shape{1, 4, 64, 64}));
  EXPECT_EQ(aux.at(0, 0, 3, 5), prev.at(3, 5));
  EXPECT_EQ(aux.at(0, 1, 7, 9), mod.at(7, 9));
  EXPECT_EQ(aux.at(0, 2, 12, 10), 0.0f);
  EXPECT_EQ(aux.at(0, 3, 12, 10), 1.0f);
}

TEST(Model, GateIsConvexAndSaturates) {
  const ModelConfig c = ModelConfig::toy();
  ParamSet p = init_params(c, 1);
  const Array f1 = random_array<float>({64, 32}, 1);
  const Array f2 = random_array<float>({64, 32}, 2);
  auto gate = [&](const ParamSet& params) {
    Tape<float> tape;
    ParamVars<float> vars(tape, params, false);
    return gated_early_fusion(c, vars, tape.constant(f1), tape.constant(f2)).value();
  };
  const Array out = gate(p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_GE(out[i], std::min(f1[i], f2[i]) - 1e-6f);
    EXPECT_LE(out[i], std::max(f1[i], f2[i]) + 1e-6f);
  }
  p.get("gate.w").fill(0.0f);
  p.get("gate.b").fill(40.0f);
  EXPECT_LT(clickrefine::testing::max_abs_diff(gate(p), f1), 1e-6);
  p.get("gate.b").fill(-40.0f);
  EXPECT_LT(clickrefine::testing::max_abs_diff(gate(p), f2), 1e-6);
}

TEST(Model, FusionModesSelectInputs) {
  ModelConfig c = ModelConfig::toy();
  const ParamSet p = init_params(c, 1);
  const Array f1 = random_array<float>({4, 32}, 1);
  const Array f2 = random_array<float>({4, 32}, 2);
  auto fuse = [&](FusionMode mode) {
    c.fusion_mode = mode;
    Tape<float> tape;
    ParamVars<float> vars(tape, p, false);
    return gated_early_fusion(c, vars, tape.constant(f1), tape.constant(f2)).value();
  };
  EXPECT_EQ(clickrefine::testing::max_abs_diff(fuse(FusionMode::first), f1), 0.0);
  EXPECT_EQ(clickrefine::testing::max_abs_diff(fuse(FusionMode::second), f2), 0.0);
  const Array half = fuse(FusionMode::fixed);
  EXPECT_FLOAT_EQ(half[7], 0.5f * (f1[7] + f2[7]));
}

TEST(Model, FpnBranchesShapesAndZeroInput) {
  const ModelConfig c = ModelConfig::toy();
  const ParamSet p = init_params(c, 1);
  const auto branches = simple_fpn_branches(c, p, Array({1, 32, 8, 8}, 0.0f));
  const Shape expected[4] = {{1, 8, 32, 32}, {1, 16, 16, 16}, {1, 32, 8, 8}, {1, 64, 4, 4}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(branches[i].shape(), expected[i]);
    for (float v : branches[i].values()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Model, HalfScaleBranchMatchesAveragePooling) {
  const Array f = random_array<float>({1, 3, 8, 8}, 4);
  EXPECT_LT(clickrefine::testing::max_abs_diff(ops::resize_bilinear(f, 4, 4), ops::avg_pool2d(f, 2)), 1e-6);
}

TEST(Model, ZeroOffsetsMatchRegularConvolution) {
  const ModelConfig c = ModelConfig::toy();
  const ParamSet p = init_params(c, 1);
  const Array image = random_array<float>({1, 3, 64, 64}, 9, 0.0, 1.0);
  Tape<float> tape;
  ParamVars<float> vars(tape, p, false);
  const Array a = image_feature_extract(c, vars, tape.constant(image), true).value();
  const Array b = image_feature_extract(c, vars, tape.constant(image), false).value();
  ASSERT_EQ(a.shape(), (Shape{1, 32, 8, 8}));
  EXPECT_LT(clickrefine::testing::max_abs_diff(a, b), 1e-5);
}

TEST(Model, ThetaZeroLeavesEarlyFeaturesNormalizedOnly) {
  const ModelConfig c = ModelConfig::toy();
  ParamSet p = init_params(c, 1);
  p.get("fusion.theta").fill(0.0f);
  const Array fe = random_array<float>({64, 32}, 1);
  const Array fi = random_array<float>({64, 32}, 2);
  Tape<float> tape;
  ParamVars<float> vars(tape, p, false);
  const auto out = feature_fusion(c, vars, tape.constant(fe), tape.constant(fi));
  const Array expected = ops::layer_norm(fe, p.get("fusion.ln1.g"), p.get("fusion.ln1.b"), 1);
  EXPECT_LT(clickrefine::testing::max_abs_diff(out.f_early_prime.value(), expected), 1e-6);
  EXPECT_EQ(out.f_hq.shape(), (Shape{1, 16, 32, 32}));
}

TEST(Model, DynamicHeadIsAffineInKernel) {
  const Array f = random_array<float>({1, 4, 8, 8}, 1);
  const Array k1 = random_array<float>({4 * 9}, 2);
  const Array k2 = random_array<float>({4 * 9}, 3);
  Array k12(k1.shape());
  for (std::size_t i = 0; i < k12.size(); ++i) k12[i] = k1[i] + k2[i];
  const Array a = dynamic_head(f, k1, 0.25f, 3, 16, 16);
  const Array b = dynamic_head(f, k2, -0.5f, 3, 16, 16);
  const Array ab = dynamic_head(f, k12, -0.25f, 3, 16, 16);
  ASSERT_EQ(ab.shape(), (Shape{1, 1, 16, 16}));
  for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_NEAR(ab[i], a[i] + b[i], 1e-5);
}

TEST(Model, PreviousMaskAndClicksInfluenceOutput) {
  const ModelConfig c = ModelConfig::toy();
  const ParamSet p = init_params(c, 1);
  auto in = float_inputs(c, 5);
  const Array base = run(c, p, in);
  auto changed = in;
  changed.prev.fill(0.0f);
  EXPECT_GT(clickrefine::testing::max_abs_diff(run(c, p, changed), base), 1e-4);
  changed = in;
  changed.clicks.pop_back();
  EXPECT_GT(clickrefine::testing::max_abs_diff(run(c, p, changed), base), 1e-4);
}

TEST(Model, AblationsChangeActivationsAndParams) {
  ModelConfig c = ModelConfig::toy();
  const auto in = float_inputs(c, 5);
  Trace<float> full;
  const Array with_hq = run(c, init_params(c, 1), in, &full);
  EXPECT_TRUE(full.count("f_hq"));
  EXPECT_TRUE(full.count("f_early"));

  c.use_hq = false;
  const ParamSet lean = init_params(c, 1);
  EXPECT_FALSE(lean.contains("gate.w"));
  EXPECT_FALSE(lean.contains("ife.proj.w"));
  EXPECT_FALSE(lean.contains("fusion.theta"));
  Trace<float> ablated;
  run(c, lean, in, &ablated);
  EXPECT_FALSE(ablated.count("f_hq"));
  EXPECT_EQ(ablated.at("f_multiscale").shape(), full.at("f_multiscale").shape());

  c = ModelConfig::toy();
  c.use_vit_in_decoder = false;
  Trace<float> no_vit;
  run(c, init_params(c, 1), in, &no_vit);
  EXPECT_GT(clickrefine::testing::max_abs_diff(no_vit.at("f_dfc"), full.at("f_dfc")), 1e-4);
  EXPECT_EQ(clickrefine::testing::max_abs_diff(no_vit.at("f_mask"), full.at("f_mask")), 0.0);
}

TEST(Model, LearnableThetaFlag) {
  ModelConfig c = ModelConfig::toy();
  EXPECT_TRUE(init_params(c, 1).entry("fusion.theta").trainable);
  c.learnable_theta = false;
  const ParamSet p = init_params(c, 1);
  EXPECT_FALSE(p.entry("fusion.theta").trainable);
  EXPECT_FLOAT_EQ(p.get("fusion.theta")[0], 0.5f);
}

TEST(Model, CheckpointRoundTrip) {
  const auto dir = scratch("ckpt");
  Model m{ModelConfig::toy(), init_params(ModelConfig::toy(), 8)};
  save_checkpoint(m, dir);
  const Model back = load_checkpoint(dir);
  EXPECT_EQ(back.params.checksum(), m.params.checksum());
  EXPECT_EQ(nlohmann::json(back.config), nlohmann::json(m.config));

  ModelConfig other = ModelConfig::toy();
  other.hq_out_dim = 8;
  Model mismatched{other, m.params};
  const auto bad = scratch("ckpt_bad");
  save_checkpoint(mismatched, bad);
  EXPECT_THROW(load_checkpoint(bad), ValidationError);
  EXPECT_THROW(load_checkpoint(scratch("ckpt_missing")), ValidationError);
}

TEST(ModelGradients, AllTrainableGroupsMatchFiniteDifferences) {
  const ModelConfig c = ModelConfig::gradcheck();
  GradCheckOptions options;
  options.max_samples = 6;
  const GradCheckReport report =
      grad_check(clickrefine::testing::model_objective(c, 11), clickrefine::testing::jittered_params(c, 11), options);
  std::size_t groups = 0;
  for (const auto& e : report.entries) {
    EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
    groups += e.checked > 0;
  }
  std::size_t trainable = 0;
  for (const auto& e : init_params(c, 0).entries()) trainable += e.trainable;
  EXPECT_EQ(groups, trainable);
}
