#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/engine/params.hpp"
#include "clickrefine/interaction/click.hpp"
#include "clickrefine/model/config.hpp"

namespace clickrefine {

/// Frozen backbone taps, each [1, D, g, g].
template <typename T>
struct BackboneOutput {
  BasicArray<T> f_vit_1;
  BasicArray<T> f_vit_2;
  BasicArray<T> f_vit_n;
};

/// One interaction round at the model resolution.
template <typename T>
struct ModelInputs {
  BasicArray<T> image;  // [1, 3, R, R], values in [0, 1]
  BasicArray<T> prev;   // [R, R]
  BasicArray<T> mod;    // [R, R]
  std::vector<Click> clicks;
};

// Named intermediate activations, filled when a trace is passed to forward().
template <typename T>
using Trace = std::map<std::string, BasicArray<T>>;

// Frozen entries come from config.frozen_seed, trainable ones from `seed`.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

// [1, 4, R, R] auxiliary tensor: prev, mod, positive clicks, negative clicks.
template <typename T>
BasicArray<T> build_aux(const ModelConfig& config, const BasicArray<T>& prev, const BasicArray<T>& mod,
                        const std::vector<Click>& clicks);

template <typename T>
BackboneOutput<T> backbone_forward(const ModelConfig& config, const BasicParamSet<T>& params,
                                   const BasicArray<T>& image, const BasicArray<T>& aux);

// Frozen SimpleFPN branches at 4x, 2x, 1x and 1/2x the token grid.
template <typename T>
std::array<BasicArray<T>, 4> simple_fpn_branches(const ModelConfig& config, const BasicParamSet<T>& params,
                                                 const BasicArray<T>& f_vit_n);

// Trainable blocks. Token inputs are [L, D]; maps are [1, C, H, W].
template <typename T>
Var<T> gated_early_fusion(const ModelConfig& config, const ParamVars<T>& p, Var<T> f1, Var<T> f2);
template <typename T>
Var<T> fpn_merge(const ModelConfig& config, const ParamVars<T>& p, const std::array<BasicArray<T>, 4>& branches);
template <typename T>
Var<T> prev_mask_process(const ModelConfig& config, const ParamVars<T>& p, Var<T> aux);
template <typename T>
Var<T> image_feature_extract(const ModelConfig& config, const ParamVars<T>& p, Var<T> image,
                             bool deformable = true);

template <typename T>
struct FusionOutput {
  Var<T> f_early_prime;  // [L, D]
  Var<T> f_ife_prime;    // [L, D]
  Var<T> f_hq;           // [1, hq, 4g, 4g]
};
template <typename T>
FusionOutput<T> feature_fusion(const ModelConfig& config, const ParamVars<T>& p, Var<T> f_early, Var<T> f_ife);

// Full forward: logits [1, 1, R, R].
template <typename T>
Var<T> forward(const ModelConfig& config, const ParamVars<T>& p, const ModelInputs<T>& inputs,
               Trace<T>* trace = nullptr);

// Dynamic convolution of F_final [1, C, h, w] with a generated kernel (C*k*k
// values) and bias, upsampled to out_h x out_w.
template <typename T>
BasicArray<T> dynamic_head(const BasicArray<T>& f_final, const BasicArray<T>& kernel, T bias, std::size_t k,
                           std::size_t out_h, std::size_t out_w);

struct Model {
  ModelConfig config;
  ParamSet params;
};

// Probability map at the image's own size. Inputs are resized to the model
// resolution when they differ (click coordinates scaled accordingly).
Array predict(const Model& model, const Array& image, const Array& prev, const Array& mod,
              const std::vector<Click>& clicks);

void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace clickrefine
