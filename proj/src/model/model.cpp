#include "clickrefine/model/model.hpp"

#include <cmath>
#include <fstream>

#include "clickrefine/engine/autodiff.hpp"
#include "clickrefine/engine/ops.hpp"
#include "clickrefine/engine/weights_io.hpp"

namespace clickrefine {

template <typename T>
BasicArray<T> build_aux(const ModelConfig& config, const BasicArray<T>& prev, const BasicArray<T>& mod,
                        const std::vector<Click>& clicks) {
  const std::size_t r = config.input_resolution;
  require_shape(prev, Shape{r, r}, "previous mask");
  require_shape(mod, Shape{r, r}, "modulated mask");
  const Array click_map = encode_clicks(clicks, r, r, default_disk_radius(r));
  BasicArray<T> aux({1, 4, r, r});
  const std::size_t plane = r * r;
  for (std::size_t i = 0; i < plane; ++i) {
    aux[i] = prev[i];
    aux[plane + i] = mod[i];
    aux[2 * plane + i] = static_cast<T>(click_map[i]);
    aux[3 * plane + i] = static_cast<T>(click_map[plane + i]);
  }
  return aux;
}

namespace {

template <typename T>
void add_into(BasicArray<T>& dst, const BasicArray<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
BasicArray<T> ln_map(const BasicParamSet<T>& p, const std::string& name, const BasicArray<T>& x) {
  return ops::layer_norm(x, p.get(name + ".g"), p.get(name + ".b"), 1);
}

template <typename T>
ops::AttentionWeights<T> attention_weights(const BasicParamSet<T>& p, const std::string& n) {
  return {p.get(n + ".q.w"), p.get(n + ".q.b"), p.get(n + ".k.w"), p.get(n + ".k.b"),
          p.get(n + ".v.w"), p.get(n + ".v.b"), p.get(n + ".o.w"), p.get(n + ".o.b")};
}

// Shared tail of every FPN branch: 1x1 projection, LN, 3x3 conv, LN.
template <typename T>
BasicArray<T> fpn_tail(const BasicParamSet<T>& p, const std::string& n, const BasicArray<T>& x) {
  BasicArray<T> y = ops::conv2d<T>(x, p.get(n + ".proj.w"), nullptr);
  y = ln_map(p, n + ".ln1", y);
  y = ops::conv2d<T>(y, p.get(n + ".conv.w"), nullptr, {1, 1, 1});
  return ln_map(p, n + ".ln2", y);
}

}  // namespace

template <typename T>
BackboneOutput<T> backbone_forward(const ModelConfig& c, const BasicParamSet<T>& p, const BasicArray<T>& image,
                                   const BasicArray<T>& aux) {
  const std::size_t r = c.input_resolution, g = c.grid(), d = c.embed_dim;
  if (image.rank() != 4 || image.dim(2) % c.patch != 0 || image.dim(3) % c.patch != 0) {
    throw ConfigError("image resolution " + shape_to_string(image.shape()) + " is not divisible by patch " +
                      std::to_string(c.patch));
  }
  require_shape(image, Shape{1, 3, r, r}, "backbone image");
  require_shape(aux, Shape{1, 4, r, r}, "backbone aux");
  const ops::Conv2dSpec patchify{c.patch, 0, 1};
  BasicArray<T> x = ops::conv2d(image, p.get("bb.patch_img.w"), &p.get("bb.patch_img.b"), patchify);
  add_into(x, ops::conv2d(aux, p.get("bb.patch_aux.w"), &p.get("bb.patch_aux.b"), patchify));
  add_into(x, p.get("bb.pos"));
  BasicArray<T> tokens = ops::map_to_tokens(x);

  BackboneOutput<T> out;
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string n = "bb.blk" + std::to_string(i);
    BasicArray<T> h = ln_map(p, n + ".ln1", tokens);
    add_into(tokens, ops::multi_head_attention(h, h, h, c.heads, attention_weights(p, n + ".attn")));
    h = ln_map(p, n + ".ln2", tokens);
    h = ops::gelu(ops::linear(h, p.get(n + ".mlp1.w"), &p.get(n + ".mlp1.b")));
    add_into(tokens, ops::linear(h, p.get(n + ".mlp2.w"), &p.get(n + ".mlp2.b")));
    if (i == c.early_block_indices[0]) out.f_vit_1 = ops::tokens_to_map(tokens, g, g);
    if (i == c.early_block_indices[1]) out.f_vit_2 = ops::tokens_to_map(tokens, g, g);
  }
  out.f_vit_n = ops::tokens_to_map(tokens, g, g);
  require_shape(out.f_vit_n, Shape{1, d, g, g}, "backbone output");
  return out;
}

template <typename T>
std::array<BasicArray<T>, 4> simple_fpn_branches(const ModelConfig& c, const BasicParamSet<T>& p,
                                                 const BasicArray<T>& f) {
  const std::size_t g = c.grid();
  BasicArray<T> s4 = ops::transposed_conv2d<T>(f, p.get("fpn.s4.tc1.w"), 2);
  s4 = ops::gelu(ln_map(p, "fpn.s4.ln0", s4));
  s4 = ops::transposed_conv2d<T>(s4, p.get("fpn.s4.tc2.w"), 2);
  const BasicArray<T> s2 = ops::transposed_conv2d<T>(f, p.get("fpn.s2.tc1.w"), 2);
  // Half-pixel bilinear at an exact factor of two is 2x2 mean pooling; it also
  // covers odd grids.
  const BasicArray<T> s05 = ops::resize_bilinear(f, (g + 1) / 2, (g + 1) / 2);
  return {fpn_tail(p, "fpn.s4", s4), fpn_tail(p, "fpn.s2", s2), fpn_tail(p, "fpn.s1", f), fpn_tail(p, "fpn.s05", s05)};
}

namespace {

template <typename T>
using OV = ad::OptVar<T>;

template <typename T>
Var<T> conv(const ParamVars<T>& p, const std::string& n, Var<T> x, ops::Conv2dSpec spec = {}) {
  const OV<T> bias = p.params().contains(n + ".b") ? OV<T>(p(n + ".b")) : std::nullopt;
  return ad::conv2d(x, p(n + ".w"), bias, spec);
}

template <typename T>
Var<T> tconv(const ParamVars<T>& p, const std::string& n, Var<T> x) {
  return ad::transposed_conv2d(x, p(n + ".w"), 2, OV<T>(p(n + ".b")));
}

template <typename T>
Var<T> norm(const ParamVars<T>& p, const std::string& n, Var<T> x) {
  return ad::layer_norm(x, p(n + ".g"), p(n + ".b"), 1);
}

template <typename T>
Var<T> lin(const ParamVars<T>& p, const std::string& n, Var<T> x) {
  return ad::linear(x, p(n + ".w"), OV<T>(p(n + ".b")));
}

template <typename T>
Var<T> attend(const ModelConfig& c, const ParamVars<T>& p, const std::string& n, Var<T> q, Var<T> kv) {
  const ad::AttentionVars<T> a{p(n + ".q.w"), p(n + ".q.b"), p(n + ".k.w"), p(n + ".k.b"),
                               p(n + ".v.w"), p(n + ".v.b"), p(n + ".o.w"), p(n + ".o.b")};
  return ad::multi_head_attention(q, kv, kv, c.heads, a);
}

template <typename T>
void record(Trace<T>* trace, const std::string& name, Var<T> v) {
  if (trace) (*trace)[name] = v.value();
}

}  // namespace

template <typename T>
Var<T> gated_early_fusion(const ModelConfig& c, const ParamVars<T>& p, Var<T> f1, Var<T> f2) {
  if (f1.shape() != f2.shape()) {
    throw DimensionError("gated fusion inputs " + shape_to_string(f1.shape()) + " vs " + shape_to_string(f2.shape()));
  }
  switch (c.fusion_mode) {
    case FusionMode::first: return f1;
    case FusionMode::second: return f2;
    case FusionMode::fixed: return ad::affine(ad::add(f1, f2), 0.5, 0.0);
    case FusionMode::gated: break;
  }
  const Var<T> w = ad::sigmoid(lin(p, "gate", ad::concat_axis1(f1, f2)));
  return ad::add(f2, ad::mul(w, ad::sub(f1, f2)));
}

template <typename T>
Var<T> fpn_merge(const ModelConfig& c, const ParamVars<T>& p, const std::array<BasicArray<T>, 4>& branches) {
  const std::size_t hq = c.hq_resolution();
  Tape<T>& tape = p.tape();
  std::optional<Var<T>> sum;
  for (std::size_t i = 0; i < 4; ++i) {
    Var<T> b = conv(p, "fpn.merge" + std::to_string(i), tape.constant(branches[i]));
    if (b.shape()[2] != hq || b.shape()[3] != hq) b = ad::resize_bilinear(b, hq, hq);
    sum = sum ? ad::add(*sum, b) : b;
  }
  return *sum;
}

template <typename T>
Var<T> prev_mask_process(const ModelConfig& c, const ParamVars<T>& p, Var<T> aux) {
  if (c.patch_log2() > 4) throw ConfigError("patch too large for the mask path");
  Var<T> x = aux;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t stride = i < c.patch_log2() ? 2 : 1;
    x = conv(p, "mask.conv" + std::to_string(i), x, {stride, 1, 1});
    x = ad::gelu(norm(p, "mask.ln" + std::to_string(i), x));
  }
  // Xception-style block: depthwise 3x3, pointwise 1x1, residual.
  Var<T> h = conv(p, "mask.dw", x, {1, 1, c.embed_dim});
  h = ad::gelu(conv(p, "mask.pw", h));
  return ad::add(x, h);
}

template <typename T>
Var<T> image_feature_extract(const ModelConfig& c, const ParamVars<T>& p, Var<T> image, bool deformable) {
  Var<T> h = conv(p, "ife.stem.conv1", image, {2, 1, 1});
  h = ad::gelu(norm(p, "ife.stem.ln1", h));
  h = norm(p, "ife.stem.ln2", conv(p, "ife.stem.conv2", h, {1, 1, 1}));
  Var<T> x = ad::gelu(ad::add(h, conv(p, "ife.stem.short", image, {2, 0, 1})));

  for (std::size_t i = 0; i < 3; ++i) {
    const std::string n = "ife.blk" + std::to_string(i);
    const std::size_t stride = i + 1 < c.patch_log2() ? 2 : 1;
    const ops::Conv2dSpec spec{stride, 1, 1};
    Var<T> y;
    if (deformable) {
      const Var<T> offsets = conv(p, n + ".off", x, spec);
      y = ad::deformable_conv2d(x, p(n + ".dconv.w"), offsets, OV<T>(p(n + ".dconv.b")), spec);
    } else {
      y = conv(p, n + ".dconv", x, spec);
    }
    y = ad::gelu(norm(p, n + ".ln1", y));
    y = norm(p, n + ".ln2", conv(p, n + ".conv2", y, {1, 1, 1}));
    const Var<T> squeeze = ad::gelu(lin(p, n + ".se1", ad::global_avg_pool(y)));
    y = ad::scale_channels(y, ad::sigmoid(lin(p, n + ".se2", squeeze)));
    const Var<T> shortcut = stride == 1 ? x : conv(p, n + ".short", x, {stride, 0, 1});
    x = ad::gelu(ad::add(y, shortcut));
  }
  const std::size_t g = c.grid();
  if (x.shape()[2] != g) x = ad::avg_pool2d(x, x.shape()[2] / g);
  return conv(p, "ife.proj", x);
}

template <typename T>
FusionOutput<T> feature_fusion(const ModelConfig& c, const ParamVars<T>& p, Var<T> f_early, Var<T> f_ife) {
  const std::size_t g = c.grid();
  const Var<T> ca1 = attend(c, p, "fusion.ca1", f_early, f_ife);
  const Var<T> early = norm(p, "fusion.ln1", ad::add(f_early, ad::mul_scalar(ca1, p("fusion.theta"))));
  const Var<T> ca2 = attend(c, p, "fusion.ca2", f_ife, early);
  const Var<T> ife = norm(p, "fusion.ln2", ad::add(f_ife, ca2));
  Var<T> up = ad::gelu(norm(p, "fusion.upln", tconv(p, "fusion.up1", ad::tokens_to_map(ife, g, g))));
  return {early, ife, tconv(p, "fusion.up2", up)};
}

template <typename T>
Var<T> forward(const ModelConfig& c, const ParamVars<T>& p, const ModelInputs<T>& in, Trace<T>* trace) {
  c.validate();
  Tape<T>& tape = p.tape();
  const std::size_t r = c.input_resolution, g = c.grid(), hq = c.hq_resolution();
  const BasicArray<T> aux = build_aux(c, in.prev, in.mod, in.clicks);

  const BackboneOutput<T> bb = backbone_forward(c, p.params(), in.image, aux);
  const Var<T> f_ms = fpn_merge(c, p, simple_fpn_branches(c, p.params(), bb.f_vit_n));
  record(trace, "f_multiscale", f_ms);

  const Var<T> f_mask = prev_mask_process(c, p, tape.constant(aux));
  record(trace, "f_mask", f_mask);

  std::optional<Var<T>> f_hq;
  if (c.use_hq) {
    const Var<T> f_early = gated_early_fusion(c, p, tape.constant(ops::map_to_tokens(bb.f_vit_1)),
                                              tape.constant(ops::map_to_tokens(bb.f_vit_2)));
    record(trace, "f_early", f_early);
    const Var<T> f_ife = ad::map_to_tokens(image_feature_extract(c, p, tape.constant(in.image)));
    record(trace, "f_ife", f_ife);
    f_hq = feature_fusion(c, p, f_early, f_ife).f_hq;
    record(trace, "f_hq", *f_hq);
  }

  BasicArray<T> vit = bb.f_vit_n;
  if (!c.use_vit_in_decoder) vit.fill(T{0});
  Var<T> feat = ad::map_to_tokens(conv(p, "dec.dfc", ad::concat_axis1(f_mask, tape.constant(vit))));
  record(trace, "f_dfc", feat);
  Var<T> q = p("dec.tokens");
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const std::string n = "dec.l" + std::to_string(l);
    q = norm(p, n + ".ln_q1", ad::add(q, attend(c, p, n + ".ca_q", q, feat)));
    q = norm(p, n + ".ln_q2", ad::add(q, attend(c, p, n + ".sa", q, q)));
    q = norm(p, n + ".ln_q3", ad::add(q, lin(p, n + ".ffn2", ad::gelu(lin(p, n + ".ffn1", q)))));
    feat = norm(p, n + ".ln_f", ad::add(feat, attend(c, p, n + ".ca_f", feat, q)));
  }
  record(trace, "f_dfc_prime", feat);

  Var<T> up = ad::gelu(norm(p, "dec.upln", tconv(p, "dec.up1", ad::tokens_to_map(feat, g, g))));
  Var<T> f_final = ad::add(f_ms, tconv(p, "dec.up2", up));
  if (f_hq) f_final = ad::add(f_final, *f_hq);
  record(trace, "f_final", f_final);

  const Var<T> t = norm(p, "dec.final_ln", ad::add(q, attend(c, p, "dec.final_ca", q, feat)));
  const Var<T> q_final = ad::add(t, lin(p, "dec.mlp2", ad::gelu(lin(p, "dec.mlp1", t))));
  record(trace, "q_final", q_final);

  const std::size_t tokens = c.token_count;
  const Var<T> pooled =
      ad::linear(tape.constant(BasicArray<T>({1, tokens}, T{1} / static_cast<T>(tokens))), q_final, OV<T>{});
  const Var<T> wb = lin(p, "head", pooled);
  const std::size_t kk = c.hq_out_dim * c.dyn_kernel * c.dyn_kernel;
  // Generated taps are scaled by the conv's fan-in so one optimizer step on the
  // head moves the logits about as much as a step anywhere else.
  const Var<T> kernel = ad::affine(ad::reshape(ad::slice_columns(wb, 0, kk), {1, c.hq_out_dim, c.dyn_kernel, c.dyn_kernel}),
                                   1.0 / std::sqrt(static_cast<double>(kk)), 0.0);
  const Var<T> bias = ad::reshape(ad::slice_columns(wb, kk, kk + 1), {1});
  record(trace, "dyn_w", kernel);
  record(trace, "dyn_b", bias);
  Var<T> logits = ad::conv2d(f_final, kernel, OV<T>(bias), {1, c.dyn_kernel / 2, 1});
  require_shape(logits.value(), Shape{1, 1, hq, hq}, "head output");
  logits = ad::resize_bilinear(logits, r, r);
  record(trace, "logits", logits);
  return logits;
}

template <typename T>
BasicArray<T> dynamic_head(const BasicArray<T>& f_final, const BasicArray<T>& kernel, T bias, std::size_t k,
                           std::size_t out_h, std::size_t out_w) {
  const BasicArray<T> kern = kernel.reshaped({1, f_final.dim(1), k, k});
  const BasicArray<T> b({1}, bias);
  return ops::resize_bilinear(ops::conv2d(f_final, kern, &b, {1, k / 2, 1}), out_h, out_w);
}

Array predict(const Model& model, const Array& image, const Array& prev, const Array& mod,
              const std::vector<Click>& clicks) {
  const ModelConfig& c = model.config;
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw DimensionError("predict: image must be [1, 3, H, W], got " + shape_to_string(image.shape()));
  }
  const std::size_t h = image.dim(2), w = image.dim(3), r = c.input_resolution;
  require_shape(prev, Shape{h, w}, "predict prev");
  require_shape(mod, Shape{h, w}, "predict mod");
  for (const Click& click : clicks) validate_click(click, h, w);

  ModelInputs<float> in;
  if (h == r && w == r) {
    in = {image, prev, mod, clicks};
  } else {
    in.image = ops::resize_bilinear(image, r, r);
    in.prev = ops::resize_bilinear(prev.reshaped({1, 1, h, w}), r, r).reshaped({r, r});
    in.mod = ops::resize_bilinear(mod.reshaped({1, 1, h, w}), r, r).reshaped({r, r});
    for (Click click : clicks) {
      click.x = std::min<int>(static_cast<int>(r) - 1, static_cast<int>((click.x + 0.5) * r / w));
      click.y = std::min<int>(static_cast<int>(r) - 1, static_cast<int>((click.y + 0.5) * r / h));
      in.clicks.push_back(click);
    }
  }

  Tape<float> tape;
  ParamVars<float> vars(tape, model.params, false);
  Array logits = forward(c, vars, in).value();
  if (h != r || w != r) logits = ops::resize_bilinear(logits, h, w);
  Array prob = ops::sigmoid(logits);
  return prob.reshaped({h, w});
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_weights(model.params, dir / "weights.json");
  std::ofstream out(dir / "config.json");
  if (!out) throw ValidationError("cannot write " + (dir / "config.json").string());
  out << nlohmann::json{{"model", model.config}}.dump(2) << "\n";
}

Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw ValidationError("missing checkpoint config in " + dir.string());
  Model model;
  try {
    model.config = nlohmann::json::parse(in).at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint config: ") + e.what());
  }
  model.params = load_weights(dir / "weights.json");
  const ParamSet expected = init_params(model.config, 0);
  if (expected.size() != model.params.size()) {
    throw ValidationError("checkpoint has " + std::to_string(model.params.size()) + " tensors, config expects " +
                          std::to_string(expected.size()));
  }
  for (const auto& e : expected.entries()) {
    if (!model.params.contains(e.name)) throw ValidationError("checkpoint is missing " + e.name);
    const auto& got = model.params.entry(e.name);
    if (got.value.shape() != e.value.shape()) {
      throw ValidationError("checkpoint tensor " + e.name + " has shape " + shape_to_string(got.value.shape()) +
                            ", config expects " + shape_to_string(e.value.shape()));
    }
    if (got.trainable != e.trainable) throw ValidationError("checkpoint tensor " + e.name + " has wrong trainable flag");
  }
  return model;
}

#define CLICKREFINE_INSTANTIATE_MODEL(T)                                                                           \
  template BasicArray<T> build_aux(const ModelConfig&, const BasicArray<T>&, const BasicArray<T>&,                 \
                                   const std::vector<Click>&);                                                     \
  template BackboneOutput<T> backbone_forward(const ModelConfig&, const BasicParamSet<T>&, const BasicArray<T>&,   \
                                              const BasicArray<T>&);                                               \
  template std::array<BasicArray<T>, 4> simple_fpn_branches(const ModelConfig&, const BasicParamSet<T>&,           \
                                                            const BasicArray<T>&);                                 \
  template Var<T> gated_early_fusion(const ModelConfig&, const ParamVars<T>&, Var<T>, Var<T>);                     \
  template Var<T> fpn_merge(const ModelConfig&, const ParamVars<T>&, const std::array<BasicArray<T>, 4>&);         \
  template Var<T> prev_mask_process(const ModelConfig&, const ParamVars<T>&, Var<T>);                              \
  template Var<T> image_feature_extract(const ModelConfig&, const ParamVars<T>&, Var<T>, bool);                    \
  template FusionOutput<T> feature_fusion(const ModelConfig&, const ParamVars<T>&, Var<T>, Var<T>);                \
  template Var<T> forward(const ModelConfig&, const ParamVars<T>&, const ModelInputs<T>&, Trace<T>*);              \
  template BasicArray<T> dynamic_head(const BasicArray<T>&, const BasicArray<T>&, T, std::size_t, std::size_t,     \
                                      std::size_t);

CLICKREFINE_INSTANTIATE_MODEL(float)
CLICKREFINE_INSTANTIATE_MODEL(double)

#undef CLICKREFINE_INSTANTIATE_MODEL

}  // namespace clickrefine
