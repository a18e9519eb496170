#include "clickrefine/model/config.hpp"

#include "clickrefine/core/errors.hpp"

namespace clickrefine {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::gated: return "gated";
    case FusionMode::fixed: return "fixed";
    case FusionMode::first: return "first";
    case FusionMode::second: return "second";
  }
  return "gated";
}

FusionMode fusion_mode_from_string(const std::string& text) {
  if (text == "gated") return FusionMode::gated;
  if (text == "fixed") return FusionMode::fixed;
  if (text == "first") return FusionMode::first;
  if (text == "second") return FusionMode::second;
  throw ConfigError("unknown fusion mode: " + text);
}

std::size_t ModelConfig::patch_log2() const {
  std::size_t n = 0;
  for (std::size_t p = patch; p > 1; p >>= 1) ++n;
  return n;
}

void ModelConfig::validate() const {
  if (patch < 2 || patch > 16 || (patch & (patch - 1)) != 0) throw ConfigError("patch must be a power of two in [2, 16]");
  if (input_resolution == 0 || input_resolution % patch != 0) {
    throw ConfigError("input_resolution " + std::to_string(input_resolution) + " is not divisible by patch " +
                      std::to_string(patch));
  }
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4");
  if (depth == 0) throw ConfigError("depth must be positive");
  for (std::size_t i : early_block_indices) {
    if (i >= depth) throw ConfigError("early_block_indices must be < depth");
  }
  for (std::size_t d : fpn_dims) {
    if (d == 0) throw ConfigError("fpn_dims must be positive");
  }
  if (hq_out_dim == 0 || extractor_dim < 4) throw ConfigError("hq_out_dim and extractor_dim must be positive");
  if (decoder_layers < 1) throw ConfigError("decoder_layers must be >= 1");
  if (token_count < 1) throw ConfigError("token_count must be >= 1");
  if (dyn_kernel % 2 == 0) throw ConfigError("dyn_kernel must be odd");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::gradcheck() {
  ModelConfig c;
  c.input_resolution = 32;
  c.patch = 8;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 3;
  c.early_block_indices = {1, 2};
  c.fpn_dims = {4, 4, 8, 8};
  c.hq_out_dim = 8;
  c.extractor_dim = 8;
  c.mlp_ratio = 2;
  return c;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.input_resolution = 448;
  c.patch = 16;
  c.embed_dim = 768;
  c.depth = 12;
  c.heads = 8;
  c.early_block_indices = {4, 8};
  c.fpn_dims = {128, 256, 512, 1024};
  c.hq_out_dim = 192;
  c.extractor_dim = 96;
  c.decoder_layers = 2;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"patch", c.patch},
       {"embed_dim", c.embed_dim},
       {"depth", c.depth},
       {"heads", c.heads},
       {"early_block_indices", c.early_block_indices},
       {"fpn_dims", c.fpn_dims},
       {"hq_out_dim", c.hq_out_dim},
       {"extractor_dim", c.extractor_dim},
       {"decoder_layers", c.decoder_layers},
       {"token_count", c.token_count},
       {"dyn_kernel", c.dyn_kernel},
       {"input_resolution", c.input_resolution},
       {"mlp_ratio", c.mlp_ratio},
       {"use_hq", c.use_hq},
       {"use_vit_in_decoder", c.use_vit_in_decoder},
       {"fusion_mode", to_string(c.fusion_mode)},
       {"learnable_theta", c.learnable_theta},
       {"theta_init", c.theta_init},
       {"frozen_seed", c.frozen_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.patch = j.value("patch", d.patch);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.early_block_indices = j.value("early_block_indices", d.early_block_indices);
  c.fpn_dims = j.value("fpn_dims", d.fpn_dims);
  c.hq_out_dim = j.value("hq_out_dim", d.hq_out_dim);
  c.extractor_dim = j.value("extractor_dim", d.extractor_dim);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.token_count = j.value("token_count", d.token_count);
  c.dyn_kernel = j.value("dyn_kernel", d.dyn_kernel);
  c.input_resolution = j.value("input_resolution", d.input_resolution);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.use_hq = j.value("use_hq", d.use_hq);
  c.use_vit_in_decoder = j.value("use_vit_in_decoder", d.use_vit_in_decoder);
  c.fusion_mode = fusion_mode_from_string(j.value("fusion_mode", to_string(d.fusion_mode)));
  c.learnable_theta = j.value("learnable_theta", d.learnable_theta);
  c.theta_init = j.value("theta_init", d.theta_init);
  c.frozen_seed = j.value("frozen_seed", d.frozen_seed);
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"patch", "embed_dim", "depth", "heads", "early_block_indices", "fpn_dims",
                                  "hq_out_dim", "extractor_dim", "decoder_layers", "token_count", "dyn_kernel",
                                  "input_resolution", "mlp_ratio", "use_hq", "use_vit_in_decoder", "fusion_mode",
                                  "learnable_theta", "theta_init", "frozen_seed"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown model config key: " + key);
  }
  c.validate();
}

}  // namespace clickrefine
