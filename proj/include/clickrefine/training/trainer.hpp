#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clickrefine/data/synthetic.hpp"
#include "clickrefine/engine/tape.hpp"
#include "clickrefine/model/model.hpp"
#include "clickrefine/modulation/modulation.hpp"

namespace clickrefine {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t samples_per_epoch = 200;
  double lr = 1e-3;
  std::vector<std::size_t> lr_drop_epochs{14, 18};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch = 1;
  int max_clicks = 24;
  std::size_t crop = 64;
  bool modulate_during_training = true;
  int max_rounds = 3;  // rounds per sample drawn uniformly from 1..max_rounds
  double focal_gamma = 2.0;
  bool augment = true;
  ModulationParams modulation;
  std::uint64_t seed = 0;

  void validate() const;

  static TrainConfig desk();
  static TrainConfig paper_scale();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Focal-weighted cross-entropy normalised by the sum of focal weights, over a
// logit map and a binary target of the same spatial size.
template <typename T>
Var<T> normalized_focal_loss(Var<T> logits, const Mask& gt, double gamma);

struct OptimizerState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

OptimizerState init_optimizer(const ParamSet& params);

// Learning rate for a 0-based epoch: base lr times 0.1 per drop epoch already
// reached.
double lr_at_epoch(const TrainConfig& config, std::size_t epoch);

struct TrainingSample {
  ModelInputs<float> inputs;
  Mask gt;
};

// Seeded flips, rot90, brightness and per-channel affine jitter, then a crop
// resized to the model resolution.
SyntheticSample augment_sample(const SyntheticSample& sample, const TrainConfig& config, std::size_t resolution,
                               std::uint64_t seed);

// Runs `round_count` simulator rounds without gradients and returns the inputs
// for the supervised step.
TrainingSample synthesize_sample(const SyntheticSample& sample, const Model& model, int round_count,
                                 const TrainConfig& config, std::uint64_t seed);

// Mean loss over the batch; Adam update on trainable entries at rate `lr`.
double train_step(const std::vector<TrainingSample>& batch, Model& model, OptimizerState& opt,
                  const TrainConfig& config, double lr);

struct TrainResult {
  Model model;
  std::vector<double> epoch_losses;
};

// Full loop. Writes one JSON line per step to `log` when given.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::vector<SyntheticSample>& data, std::ostream* log = nullptr);

}  // namespace clickrefine
