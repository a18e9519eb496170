#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace clickrefine {

enum class FusionMode { gated, fixed, first, second };

std::string to_string(FusionMode mode);
FusionMode fusion_mode_from_string(const std::string& text);

struct ModelConfig {
  std::size_t patch = 8;
  std::size_t embed_dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::array<std::size_t, 2> early_block_indices{1, 2};
  std::array<std::size_t, 4> fpn_dims{8, 16, 32, 64};
  std::size_t hq_out_dim = 16;
  std::size_t extractor_dim = 16;
  std::size_t decoder_layers = 2;
  std::size_t token_count = 1;
  std::size_t dyn_kernel = 3;
  std::size_t input_resolution = 64;
  std::size_t mlp_ratio = 4;

  // Ablation switches.
  bool use_hq = true;               // extractor + fusion + F_HQ additive term
  bool use_vit_in_decoder = true;   // F_ViT^N injection into the dense fusion conv
  FusionMode fusion_mode = FusionMode::gated;
  bool learnable_theta = true;
  double theta_init = 0.5;

  std::uint64_t frozen_seed = 1234;

  std::size_t grid() const { return input_resolution / patch; }
  std::size_t hq_resolution() const { return 4 * grid(); }
  std::size_t patch_log2() const;

  void validate() const;

  // Desk-scale default, the small double-precision gradient-check network, and
  // the published ViT-Base dimensions (never trained here).
  static ModelConfig toy();
  static ModelConfig gradcheck();
  static ModelConfig paper_scale();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace clickrefine
