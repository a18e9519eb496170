#include "clickrefine/engine/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "clickrefine/core/rng.hpp"

namespace clickrefine {

template <typename T>
void BasicParamSet<T>::add(const std::string& name, BasicArray<T> value, bool trainable) {
  if (contains(name)) throw ValidationError("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(value), trainable});
}

template <typename T>
const typename BasicParamSet<T>::Entry& BasicParamSet<T>::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
typename BasicParamSet<T>::Entry& BasicParamSet<T>::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
std::size_t BasicParamSet<T>::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

namespace {

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

template <typename T>
std::uint64_t BasicParamSet<T>::checksum(Subset subset) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries_) {
    if (subset == Subset::frozen && e.trainable) continue;
    if (subset == Subset::trainable && !e.trainable) continue;
    fnv(h, e.name.data(), e.name.size());
    for (std::size_t d : e.value.shape()) fnv(h, &d, sizeof d);
    fnv(h, e.value.data(), e.value.size() * sizeof(T));
  }
  return h;
}

template class BasicParamSet<float>;
template class BasicParamSet<double>;

template <typename T>
ParamVars<T>::ParamVars(Tape<T>& tape, const BasicParamSet<T>& params, bool track_gradients)
    : tape_(&tape), params_(&params) {
  for (const auto& e : params.entries()) {
    if (e.trainable) leaves_.emplace(e.name, tape.leaf(e.value, track_gradients));
  }
}

template <typename T>
Var<T> ParamVars<T>::operator()(const std::string& name) const {
  if (auto it = leaves_.find(name); it != leaves_.end()) return it->second;
  if (auto it = constants_.find(name); it != constants_.end()) return it->second;
  const Var<T> v = tape_->constant(params_->get(name));
  constants_.emplace(name, v);
  return v;
}

template class ParamVars<float>;
template class ParamVars<double>;

GradCheckReport grad_check(const ScalarFn& f, ParamSet64 params, const GradCheckOptions& options) {
  auto evaluate = [&](const ParamSet64& p) {
    Tape<double> tape;
    ParamVars<double> vars(tape, p, false);
    const Var<double> out = f(tape, vars);
    if (out.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  Tape<double> tape;
  ParamVars<double> vars(tape, params, true);
  const Var<double> root = f(tape, vars);
  if (!std::isfinite(root.value()[0])) throw NumericError("grad_check: non-finite loss");
  tape.backward(root);
  const double centre = root.value()[0];

  GradCheckReport report;
  Rng rng(options.seed);
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Var<double> leaf = vars.leaves().at(e.name);
    const BasicArray<double> analytic =
        tape.has_grad(leaf) ? tape.grad(leaf) : BasicArray<double>(e.value.shape());

    std::vector<std::size_t> indices(e.value.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (indices.size() > options.max_samples) {
      for (std::size_t i = 0; i < options.max_samples; ++i) {
        std::swap(indices[i], indices[i + rng.below(indices.size() - i)]);
      }
      indices.resize(options.max_samples);
    }

    GradCheckEntry result{e.name, indices.size(), 0.0, 0.0, 0};
    for (std::size_t idx : indices) {
      const double original = e.value[idx];
      const double h = options.step * std::max(1.0, std::abs(original));
      e.value[idx] = original + h;
      const double up = evaluate(params);
      e.value[idx] = original - h;
      const double down = evaluate(params);
      e.value[idx] = original;
      const double numeric = (up - down) / (2.0 * h);
      auto rel = [&](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), options.floor}); };
      const double abs_err = std::abs(numeric - analytic[idx]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), options.floor});
      if (abs_err / denom >= options.tolerance) {
        const double forward = (up - centre) / h, backward = (centre - down) / h;
        if (rel(forward, backward) > 1e-2 &&
            std::min(rel(forward, analytic[idx]), rel(backward, analytic[idx])) < 1e-3) {
          ++result.nonsmooth;
          continue;
        }
      }
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
    report.entries.push_back(std::move(result));
  }
  return report;
}

}  // namespace clickrefine
