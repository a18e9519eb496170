#include <cmath>

#include "clickrefine/training/trainer.hpp"

namespace clickrefine {

template <typename T>
Var<T> normalized_focal_loss(Var<T> logits, const Mask& gt, double gamma) {
  const BasicArray<T>& z = logits.value();
  if (z.size() != gt.size()) {
    throw DimensionError("focal loss: logits " + shape_to_string(z.shape()) + " vs target " +
                         shape_to_string(gt.shape()));
  }
  if (gamma < 0.0) throw ConfigError("focal gamma must be non-negative");
  const std::size_t n = z.size();
  // -ln(1e-6): the per-pixel cross-entropy is capped as if p_t were clamped.
  const double cap = 13.815510557964274;
  std::vector<double> u(n), pt(n), w(n), ce(n);
  double weight_sum = 1e-12, weighted = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = (gt[i] ? 1.0 : -1.0) * static_cast<double>(z[i]);
    pt[i] = 1.0 / (1.0 + std::exp(-u[i]));
    w[i] = std::pow(1.0 - pt[i], gamma);
    // softplus(-u) = -ln p_t, computed without overflow.
    const double sp = std::max(-u[i], 0.0) + std::log1p(std::exp(-std::abs(u[i])));
    ce[i] = std::min(sp, cap);
    weight_sum += w[i];
    weighted += w[i] * ce[i];
  }
  const double loss = weighted / weight_sum;
  if (!std::isfinite(loss)) throw NumericError("focal loss is not finite");

  Tape<T>& tape = *logits.tape;
  return tape.push(BasicArray<T>({1}, static_cast<T>(loss)), logits.requires_grad(),
                   [=](Tape<T>& t, std::size_t self) {
                     const double g = static_cast<double>(t.grad(self)[0]);
                     BasicArray<T>& dz = t.grad(logits);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double dw = -gamma * std::pow(1.0 - pt[i], gamma) * pt[i];
                       const double dce = ce[i] < cap ? -(1.0 - pt[i]) : 0.0;
                       const double du = (dw * ce[i] + w[i] * dce) / weight_sum - loss * dw / weight_sum;
                       dz[i] += static_cast<T>(g * (gt[i] ? du : -du));
                     }
                   });
}

template Var<float> normalized_focal_loss(Var<float>, const Mask&, double);
template Var<double> normalized_focal_loss(Var<double>, const Mask&, double);

}  // namespace clickrefine
