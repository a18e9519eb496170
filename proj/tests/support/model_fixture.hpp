#pragma once

#include <cstdint>

#include "clickrefine/core/rng.hpp"
#include "clickrefine/engine/autodiff.hpp"
#include "clickrefine/engine/params.hpp"
#include "clickrefine/model/model.hpp"

namespace clickrefine::testing {

// Trainable entries jittered away from their init so no gradient is trivially
// zero (offset convs start at zero, LN gains at one) and deformable sampling
// points sit off the integer grid.
inline ParamSet64 jittered_params(const ModelConfig& config, std::uint64_t seed) {
  ParamSet64 params = init_params(config, seed).cast<double>();
  Rng rng(seed ^ 0x5eedULL);
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const bool offsets = e.name.find(".off.") != std::string::npos;
    const double scale = offsets ? 0.05 : 0.1;
    for (auto& v : e.value.values()) v += scale * rng.normal();
  }
  return params;
}

inline ModelInputs<double> random_inputs(const ModelConfig& config, std::uint64_t seed) {
  const std::size_t r = config.input_resolution;
  Rng rng(seed);
  ModelInputs<double> in;
  in.image = BasicArray<double>({1, 3, r, r});
  for (auto& v : in.image.values()) v = rng.uniform();
  in.prev = BasicArray<double>({r, r});
  for (auto& v : in.prev.values()) v = rng.uniform();
  in.mod = BasicArray<double>({r, r});
  for (auto& v : in.mod.values()) v = rng.uniform();
  in.clicks = {Click{rng.range(0, static_cast<int>(r) - 1), rng.range(0, static_cast<int>(r) - 1), ClickKind::positive, 1},
               Click{rng.range(0, static_cast<int>(r) - 1), rng.range(0, static_cast<int>(r) - 1), ClickKind::negative, 2}};
  return in;
}

// Scalar objective: logits weighted by a fixed random map, summed.
inline ScalarFn model_objective(const ModelConfig& config, std::uint64_t seed) {
  const ModelInputs<double> in = random_inputs(config, seed);
  const std::size_t r = config.input_resolution;
  BasicArray<double> weights({1, 1, r, r});
  Rng rng(seed + 1);
  for (auto& v : weights.values()) v = rng.uniform(-1.0, 1.0);
  return [config, in, weights](Tape<double>& tape, const ParamVars<double>& vars) {
    const Var<double> logits = forward(config, vars, in);
    return ad::sum(ad::mul(logits, tape.constant(weights)));
  };
}

}  // namespace clickrefine::testing
