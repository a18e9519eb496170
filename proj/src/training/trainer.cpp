#include "clickrefine/training/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clickrefine/core/rng.hpp"
#include "clickrefine/engine/ops.hpp"

namespace clickrefine {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
  if (epochs == 0 || samples_per_epoch == 0 || batch == 0) throw ConfigError("epochs, samples and batch must be > 0");
  if (max_clicks < 1 || max_clicks > 24) throw ConfigError("max_clicks must be in [1, 24]");
  if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
  if (crop < 8) throw ConfigError("crop must be >= 8");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (focal_gamma < 0.0) throw ConfigError("focal_gamma must be >= 0");
  modulation.validate();
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper_scale() {
  TrainConfig c;
  c.epochs = 60;
  c.samples_per_epoch = 30000;
  c.lr = 5e-5;
  c.lr_drop_epochs = {10, 50};
  c.batch = 16;
  c.crop = 448;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"samples_per_epoch", c.samples_per_epoch},
       {"lr", c.lr},
       {"lr_drop_epochs", c.lr_drop_epochs},
       {"betas", {c.beta1, c.beta2}},
       {"eps", c.eps},
       {"batch", c.batch},
       {"max_clicks", c.max_clicks},
       {"crop", c.crop},
       {"modulate_during_training", c.modulate_during_training},
       {"max_rounds", c.max_rounds},
       {"focal_gamma", c.focal_gamma},
       {"augment", c.augment},
       {"modulation", c.modulation},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"epochs", "samples_per_epoch", "lr", "lr_drop_epochs", "betas", "eps", "batch",
                                "max_clicks", "crop", "modulate_during_training", "max_rounds", "focal_gamma",
                                "augment", "modulation", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown training config key: " + key);
    }
  }
  const TrainConfig d;
  try {
    c.epochs = j.value("epochs", d.epochs);
    c.samples_per_epoch = j.value("samples_per_epoch", d.samples_per_epoch);
    c.lr = j.value("lr", d.lr);
    c.lr_drop_epochs = j.value("lr_drop_epochs", d.lr_drop_epochs);
    if (j.contains("betas")) {
      const auto betas = j.at("betas").get<std::vector<double>>();
      if (betas.size() != 2) throw ConfigError("betas must have two entries");
      c.beta1 = betas[0];
      c.beta2 = betas[1];
    } else {
      c.beta1 = d.beta1;
      c.beta2 = d.beta2;
    }
    c.eps = j.value("eps", d.eps);
    c.batch = j.value("batch", d.batch);
    c.max_clicks = j.value("max_clicks", d.max_clicks);
    c.crop = j.value("crop", d.crop);
    c.modulate_during_training = j.value("modulate_during_training", d.modulate_during_training);
    c.max_rounds = j.value("max_rounds", d.max_rounds);
    c.focal_gamma = j.value("focal_gamma", d.focal_gamma);
    c.augment = j.value("augment", d.augment);
    c.modulation = j.value("modulation", d.modulation);
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
}

OptimizerState init_optimizer(const ParamSet& params) {
  OptimizerState s;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    s.m[e.name].assign(e.value.size(), 0.0);
    s.v[e.name].assign(e.value.size(), 0.0);
  }
  return s;
}

double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
  double lr = config.lr;
  for (std::size_t d : config.lr_drop_epochs) {
    if (epoch >= d) lr *= 0.1;
  }
  return lr;
}

namespace {

SyntheticSample rot90(const SyntheticSample& s) {
  const std::size_t h = s.gt.dim(0), w = s.gt.dim(1);
  SyntheticSample out{Array({1, 3, w, h}), Mask({w, h})};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t ny = w - 1 - x, nx = y;
      out.gt.at(ny, nx) = s.gt.at(y, x);
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, ny, nx) = s.image.at(0, c, y, x);
    }
  }
  return out;
}

SyntheticSample hflip(const SyntheticSample& s) {
  const std::size_t h = s.gt.dim(0), w = s.gt.dim(1);
  SyntheticSample out{Array(s.image.shape()), Mask(s.gt.shape())};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.gt.at(y, w - 1 - x) = s.gt.at(y, x);
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, y, w - 1 - x) = s.image.at(0, c, y, x);
    }
  }
  return out;
}

bool any_set(const Mask& m) {
  return std::any_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; });
}

SyntheticSample crop_and_resize(const SyntheticSample& s, std::size_t crop, std::size_t r, Rng& rng) {
  const std::size_t h = s.gt.dim(0), w = s.gt.dim(1);
  SyntheticSample out = s;
  if (h > crop && w > crop) {
    for (int attempt = 0; attempt < 8; ++attempt) {
      const std::size_t y0 = rng.below(h - crop + 1), x0 = rng.below(w - crop + 1);
      SyntheticSample c{Array({1, 3, crop, crop}), Mask({crop, crop})};
      for (std::size_t y = 0; y < crop; ++y) {
        for (std::size_t x = 0; x < crop; ++x) {
          c.gt.at(y, x) = s.gt.at(y0 + y, x0 + x);
          for (std::size_t ch = 0; ch < 3; ++ch) c.image.at(0, ch, y, x) = s.image.at(0, ch, y0 + y, x0 + x);
        }
      }
      if (any_set(c.gt)) {
        out = std::move(c);
        break;
      }
    }
  }
  const std::size_t oh = out.gt.dim(0), ow = out.gt.dim(1);
  if (oh == r && ow == r) return out;
  SyntheticSample resized{ops::resize_bilinear(out.image, r, r), Mask({r, r})};
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) resized.gt.at(y, x) = out.gt.at(y * oh / r, x * ow / r);
  }
  if (!any_set(resized.gt)) return out.gt.dim(0) == r ? out : resized;
  return resized;
}

}  // namespace

SyntheticSample augment_sample(const SyntheticSample& sample, const TrainConfig& config, std::size_t resolution,
                               std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xa09u));
  SyntheticSample s = sample;
  if (config.augment) {
    if (rng.bernoulli(0.5)) s = hflip(s);
    const int turns = rng.range(0, 3);
    for (int i = 0; i < turns; ++i) s = rot90(s);
    const double brightness = rng.uniform(-0.1, 0.1);
    const std::size_t plane = s.gt.size();
    for (std::size_t c = 0; c < 3; ++c) {
      const double gain = rng.uniform(0.9, 1.1), bias = rng.uniform(-0.05, 0.05);
      for (std::size_t i = 0; i < plane; ++i) {
        float& v = s.image[c * plane + i];
        v = static_cast<float>(std::clamp(gain * v + bias + brightness, 0.0, 1.0));
      }
    }
  }
  return crop_and_resize(s, config.crop, resolution, rng);
}

TrainingSample synthesize_sample(const SyntheticSample& sample, const Model& model, int round_count,
                                 const TrainConfig& config, std::uint64_t seed) {
  if (round_count < 1) throw ValidationError("round_count must be >= 1");
  const std::size_t r = model.config.input_resolution;
  require_shape(sample.gt, Shape{r, r}, "training target");
  ClickSamplerConfig sampler;
  sampler.max_clicks = config.max_clicks;

  TrainingSample out;
  out.gt = sample.gt;
  out.inputs.image = sample.image;
  out.inputs.prev = Array({r, r}, 0.0f);
  out.inputs.mod = Array({r, r}, 0.0f);
  out.inputs.clicks = sample_training_clicks(sample.gt, nullptr, {}, 1, seed, sampler);
  for (int round = 2; round <= round_count; ++round) {
    const Array prob = predict(model, out.inputs.image, out.inputs.prev, out.inputs.mod, out.inputs.clicks);
    out.inputs.mod = config.modulate_during_training && !out.inputs.clicks.empty()
                         ? modulate(prob, out.inputs.clicks.back(), out.inputs.clicks, config.modulation)
                         : prob;
    out.inputs.prev = prob;
    out.inputs.clicks = sample_training_clicks(sample.gt, &prob, out.inputs.clicks, round, seed, sampler);
  }
  return out;
}

double train_step(const std::vector<TrainingSample>& batch, Model& model, OptimizerState& opt,
                  const TrainConfig& config, double lr) {
  if (batch.empty()) throw ValidationError("train_step: empty batch");
  std::map<std::string, std::vector<double>> grads;
  double total = 0.0;
  for (const TrainingSample& sample : batch) {
    Tape<float> tape;
    ParamVars<float> vars(tape, model.params, true);
    const Var<float> loss = normalized_focal_loss(forward(model.config, vars, sample.inputs), sample.gt,
                                                  config.focal_gamma);
    total += loss.value()[0];
    tape.backward(loss);
    for (const auto& [name, leaf] : vars.leaves()) {
      auto& acc = grads[name];
      acc.resize(leaf.value().size(), 0.0);
      if (!tape.has_grad(leaf)) continue;
      const Array& g = tape.grad(leaf);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
  }
  const double mean_loss = total / static_cast<double>(batch.size());
  if (!std::isfinite(mean_loss)) throw NumericError("non-finite training loss");

  ++opt.step;
  const double scale = 1.0 / static_cast<double>(batch.size());
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.step));
  for (auto& e : model.params.entries()) {
    if (!e.trainable) continue;
    const auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    auto& m = opt.m.at(e.name);
    auto& v = opt.v.at(e.name);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = it->second[i] * scale;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
      e.value[i] -= static_cast<float>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps));
    }
  }
  return mean_loss;
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::vector<SyntheticSample>& data, std::ostream* log) {
  model_config.validate();
  config.validate();
  if (data.empty()) throw ValidationError("training set is empty");
  TrainResult result{Model{model_config, init_params(model_config, config.seed)}, {}};
  Model& model = result.model;
  const std::uint64_t frozen = model.params.checksum(ParamSet::Subset::frozen);
  OptimizerState opt = init_optimizer(model.params);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    const std::uint64_t epoch_seed = mix_seed(config.seed, 1000 + epoch);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    std::vector<TrainingSample> batch;
    for (std::size_t i = 0; i < config.samples_per_epoch; ++i) {
      const std::uint64_t sample_seed = mix_seed(epoch_seed, i);
      const SyntheticSample aug =
          augment_sample(data[order[i % order.size()]], config, model_config.input_resolution, sample_seed);
      if (!any_set(aug.gt)) continue;
      const int rounds = 1 + static_cast<int>(Rng(sample_seed).below(static_cast<std::uint64_t>(config.max_rounds)));
      batch.push_back(synthesize_sample(aug, model, rounds, config, sample_seed));
      if (batch.size() == config.batch || i + 1 == config.samples_per_epoch) {
        const double loss = train_step(batch, model, opt, config, lr);
        batch.clear();
        epoch_loss += loss;
        ++batches;
        ++step;
        if (log) {
          *log << nlohmann::json{{"epoch", epoch}, {"step", step}, {"loss", loss}, {"lr", lr}}.dump() << "\n";
        }
      }
    }
    if (!batch.empty()) {
      epoch_loss += train_step(batch, model, opt, config, lr);
      ++batches;
      ++step;
    }
    result.epoch_losses.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  if (model.params.checksum(ParamSet::Subset::frozen) != frozen) {
    throw NumericError("frozen parameters changed during training");
  }
  return result;
}

}  // namespace clickrefine
