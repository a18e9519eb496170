#include <cmath>
#include <string>

#include "clickrefine/core/rng.hpp"
#include "clickrefine/model/model.hpp"

namespace clickrefine {
namespace {

class Builder {
 public:
  Builder(ParamSet& params, std::uint64_t seed, bool trainable) : params_(params), rng_(seed), trainable_(trainable) {}

  void normal(const std::string& name, Shape shape, double stddev) {
    Array a(std::move(shape));
    for (auto& v : a.values()) v = static_cast<float>(stddev * rng_.normal());
    params_.add(name, std::move(a), trainable_);
  }
  // He-style scale from the fan-in.
  void weight(const std::string& name, Shape shape, std::size_t fan_in, double gain = 1.0) {
    normal(name, std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)));
  }
  void constant(const std::string& name, Shape shape, float value) {
    params_.add(name, Array(std::move(shape), value), trainable_);
  }
  void frozen_constant(const std::string& name, Shape shape, float value) {
    params_.add(name, Array(std::move(shape), value), false);
  }

  void conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias = true) {
    weight(name + ".w", {out, in, k, k}, in * k * k);
    if (bias) constant(name + ".b", {out}, 0.0f);
  }
  // Random bias: wherever the input is all zero the conv output is the bias
  // alone, and a channel norm of a near-constant vector has a huge gain.
  void conv_spread_bias(const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    weight(name + ".w", {out, in, k, k}, in * k * k);
    normal(name + ".b", {out}, 0.5);
  }
  void tconv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool bias = true) {
    weight(name + ".w", {in, out, k, k}, in);
    if (bias) constant(name + ".b", {out}, 0.0f);
  }
  void norm(const std::string& name, std::size_t dim) {
    constant(name + ".g", {dim}, 1.0f);
    constant(name + ".b", {dim}, 0.0f);
  }
  void linear(const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    weight(name + ".w", {in, out}, in, gain);
    constant(name + ".b", {out}, 0.0f);
  }
  // The key bias shifts every logit of a query row equally, so softmax
  // cancels it; it is kept as a frozen zero.
  void attention(const std::string& name, std::size_t d) {
    linear(name + ".q", d, d);
    weight(name + ".k.w", {d, d}, d);
    frozen_constant(name + ".k.b", {d}, 0.0f);
    linear(name + ".v", d, d);
    linear(name + ".o", d, d);
  }

 private:
  ParamSet& params_;
  Rng rng_;
  bool trainable_;
};

void add_frozen(const ModelConfig& c, ParamSet& params) {
  Builder b(params, c.frozen_seed, false);
  const std::size_t d = c.embed_dim, p = c.patch, g = c.grid();
  b.conv("bb.patch_img", d, 3, p);
  b.conv("bb.patch_aux", d, 4, p);
  b.normal("bb.pos", {1, d, g, g}, 0.5);
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string n = "bb.blk" + std::to_string(i);
    b.norm(n + ".ln1", d);
    b.attention(n + ".attn", d);
    b.norm(n + ".ln2", d);
    b.linear(n + ".mlp1", d, d * c.mlp_ratio);
    b.linear(n + ".mlp2", d * c.mlp_ratio, d, 0.5);
  }
  const auto& f = c.fpn_dims;
  b.tconv("fpn.s4.tc1", d, d / 2, 2, false);
  b.norm("fpn.s4.ln0", d / 2);
  b.tconv("fpn.s4.tc2", d / 2, d / 4, 2, false);
  b.conv("fpn.s4.proj", f[0], d / 4, 1, false);
  b.tconv("fpn.s2.tc1", d, d / 2, 2, false);
  b.conv("fpn.s2.proj", f[1], d / 2, 1, false);
  b.conv("fpn.s1.proj", f[2], d, 1, false);
  b.conv("fpn.s05.proj", f[3], d, 1, false);
  const char* scales[] = {"s4", "s2", "s1", "s05"};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string n = std::string("fpn.") + scales[i];
    b.norm(n + ".ln1", f[i]);
    b.conv(n + ".conv", f[i], f[i], 3, false);
    b.norm(n + ".ln2", f[i]);
  }
}

void add_trainable(const ModelConfig& c, ParamSet& params, std::uint64_t seed) {
  Builder b(params, seed, true);
  const std::size_t d = c.embed_dim, hq = c.hq_out_dim, e = c.extractor_dim, k = c.dyn_kernel;

  for (std::size_t i = 0; i < 4; ++i) b.conv("fpn.merge" + std::to_string(i), hq, c.fpn_dims[i], 1, false);

  const std::size_t mc[4] = {std::max<std::size_t>(d / 4, 4), std::max<std::size_t>(d / 2, 4), d, d};
  std::size_t in = 4;
  for (std::size_t i = 0; i < 4; ++i) {
    b.conv_spread_bias("mask.conv" + std::to_string(i), mc[i], in, 3);
    b.norm("mask.ln" + std::to_string(i), mc[i]);
    in = mc[i];
  }
  b.conv("mask.dw", d, 1, 3);
  b.conv("mask.pw", d, d, 1);

  if (c.use_hq) {
    b.linear("gate", 2 * d, d);
    b.conv("ife.stem.conv1", e, 3, 3);
    b.norm("ife.stem.ln1", e);
    b.conv("ife.stem.conv2", e, e, 3);
    b.norm("ife.stem.ln2", e);
    b.conv("ife.stem.short", e, 3, 1);
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "ife.blk" + std::to_string(i);
      b.constant(n + ".off.w", {18, e, 3, 3}, 0.0f);
      b.constant(n + ".off.b", {18}, 0.0f);
      b.conv(n + ".dconv", e, e, 3);
      b.norm(n + ".ln1", e);
      b.conv(n + ".conv2", e, e, 3);
      b.norm(n + ".ln2", e);
      b.linear(n + ".se1", e, std::max<std::size_t>(e / 4, 1));
      b.linear(n + ".se2", std::max<std::size_t>(e / 4, 1), e);
      if (i + 1 < c.patch_log2()) b.conv(n + ".short", e, e, 1);
    }
    b.conv("ife.proj", d, e, 1);

    if (c.learnable_theta) {
      b.constant("fusion.theta", {1}, static_cast<float>(c.theta_init));
    }
    b.attention("fusion.ca1", d);
    b.norm("fusion.ln1", d);
    b.attention("fusion.ca2", d);
    b.norm("fusion.ln2", d);
    b.tconv("fusion.up1", d, d / 2, 2);
    b.norm("fusion.upln", d / 2);
    b.tconv("fusion.up2", d / 2, hq, 2);
  }

  b.conv("dec.dfc", d, 2 * d, 1);
  b.normal("dec.tokens", {c.token_count, d}, 1.0);
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const std::string n = "dec.l" + std::to_string(l);
    b.attention(n + ".ca_q", d);
    b.norm(n + ".ln_q1", d);
    b.attention(n + ".sa", d);
    b.norm(n + ".ln_q2", d);
    b.linear(n + ".ffn1", d, d * c.mlp_ratio);
    b.linear(n + ".ffn2", d * c.mlp_ratio, d);
    b.norm(n + ".ln_q3", d);
    b.attention(n + ".ca_f", d);
    b.norm(n + ".ln_f", d);
  }
  b.tconv("dec.up1", d, d / 2, 2);
  b.norm("dec.upln", d / 2);
  b.tconv("dec.up2", d / 2, hq, 2);
  b.attention("dec.final_ca", d);
  b.norm("dec.final_ln", d);
  b.linear("dec.mlp1", d, d);
  b.linear("dec.mlp2", d, d);
  b.linear("head", d, hq * k * k + 1);
}

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamSet params;
  add_frozen(config, params);
  add_trainable(config, params, seed);
  if (config.use_hq && !config.learnable_theta) {
    params.add("fusion.theta", Array({1}, static_cast<float>(config.theta_init)), false);
  }
  return params;
}

}  // namespace clickrefine
