#include "clickrefine/modulation/modulation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace clickrefine {

void ModulationParams::validate() const {
  if (!(r_min > 0.0 && r_min <= r_max)) throw ConfigError("modulation requires 0 < r_min <= r_max");
  if (!(p_clamp_low > 0.0 && p_clamp_low < p_clamp_high && p_clamp_high < 1.0)) {
    throw ConfigError("modulation requires 0 < p_clamp_low < p_clamp_high < 1");
  }
}

template <typename T>
void validate_prob_map(const BasicArray<T>& prob) {
  if (prob.rank() != 2) throw DimensionError("probability map must be H x W, got " + shape_to_string(prob.shape()));
  for (T v : prob.values()) {
    if (!std::isfinite(v)) throw NumericError("probability map contains a non-finite value");
    if (v < T{0} || v > T{1}) throw ValidationError("probability map value outside [0, 1]");
  }
}

double modulation_radius(const Click& u, const std::vector<Click>& all_clicks, const ModulationParams& params) {
  double nearest = std::numeric_limits<double>::infinity();
  for (const Click& c : all_clicks) {
    if (c.kind == u.kind) continue;
    const double dx = c.x - u.x, dy = c.y - u.y;
    nearest = std::min(nearest, std::sqrt(dx * dx + dy * dy));
  }
  const double r = std::isinf(nearest) ? params.r_max : 0.5 * nearest;
  return std::max(r, params.r_min);
}

template <typename T>
ModulationWindow filter_window(const BasicArray<T>& prob, const Click& u, double radius, bool filtered) {
  validate_prob_map(prob);
  const int h = static_cast<int>(prob.dim(0)), w = static_cast<int>(prob.dim(1));
  validate_click(u, prob.dim(0), prob.dim(1));
  if (!(radius > 0.0)) throw ValidationError("filter_window: radius must be positive");

  ModulationWindow win;
  win.center = u;
  win.radius = radius;
  win.p_center = static_cast<double>(prob[static_cast<std::size_t>(u.y) * w + u.x]);

  const int reach = static_cast<int>(std::floor(radius));
  std::vector<WindowMember> circle;
  std::vector<double> values;
  double sum = 0.0;
  for (int y = std::max(0, u.y - reach); y <= std::min(h - 1, u.y + reach); ++y) {
    for (int x = std::max(0, u.x - reach); x <= std::min(w - 1, u.x + reach); ++x) {
      const double dx = x - u.x, dy = y - u.y;
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d > radius) continue;
      const double p = static_cast<double>(prob[static_cast<std::size_t>(y) * w + x]);
      circle.push_back({y, x, d});
      values.push_back(p);
      sum += p;
    }
  }
  win.circle_size = circle.size();
  win.mean = sum / static_cast<double>(values.size());
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  win.median = sorted[(sorted.size() - 1) / 2];
  win.min = sorted.front();
  win.max = sorted.back();

  if (!filtered) {
    win.threshold = u.positive() ? win.min : win.max;
    win.members = std::move(circle);
    return win;
  }
  if (u.positive()) {
    win.threshold = std::min({win.p_center, win.mean, win.median});
  } else {
    win.threshold = std::max({win.p_center, win.mean, win.median});
  }
  for (std::size_t i = 0; i < circle.size(); ++i) {
    const bool keep = u.positive() ? values[i] >= win.threshold : values[i] <= win.threshold;
    if (keep) win.members.push_back(circle[i]);
  }
  return win;
}

template <typename T>
BasicArray<T> modulate(const BasicArray<T>& prob, const Click& u, const std::vector<Click>& all_clicks,
                       const ModulationParams& params) {
  params.validate();
  const double radius = params.filtered ? modulation_radius(u, all_clicks, params) : params.r_max;
  const ModulationWindow win = filter_window(prob, u, radius, params.filtered);

  const double p_u = std::clamp(win.p_center, params.p_clamp_low, params.p_clamp_high);
  const double gamma_max = u.positive() ? std::log(p_u) / std::log(0.99) : std::log(0.01) / std::log(p_u);

  BasicArray<T> out = prob;
  const std::size_t w = prob.dim(1);
  for (const WindowMember& m : win.members) {
    const double ratio = m.distance / radius;
    const double gamma = gamma_max * (1.0 - ratio) + ratio;
    const std::size_t i = static_cast<std::size_t>(m.y) * w + m.x;
    const double p = static_cast<double>(prob[i]);
    const double v = u.positive() ? std::pow(p, 1.0 / gamma) : std::pow(p, gamma);
    if (!std::isfinite(v)) throw NumericError("modulate: non-finite probability");
    out[i] = static_cast<T>(v);
  }
  return out;
}

template void validate_prob_map(const Array&);
template void validate_prob_map(const Array64&);
template ModulationWindow filter_window(const Array&, const Click&, double, bool);
template ModulationWindow filter_window(const Array64&, const Click&, double, bool);
template Array modulate(const Array&, const Click&, const std::vector<Click>&, const ModulationParams&);
template Array64 modulate(const Array64&, const Click&, const std::vector<Click>&, const ModulationParams&);

void to_json(nlohmann::json& j, const ModulationParams& p) {
  j = {{"r_max", p.r_max}, {"r_min", p.r_min}, {"p_clamp_low", p.p_clamp_low}, {"p_clamp_high", p.p_clamp_high},
       {"filtered", p.filtered}};
}

void from_json(const nlohmann::json& j, ModulationParams& p) {
  const ModulationParams d;
  for (const auto& [key, value] : j.items()) {
    if (key != "r_max" && key != "r_min" && key != "p_clamp_low" && key != "p_clamp_high" && key != "filtered") {
      throw ConfigError("unknown modulation key: " + key);
    }
  }
  p.r_max = j.value("r_max", d.r_max);
  p.r_min = j.value("r_min", d.r_min);
  p.p_clamp_low = j.value("p_clamp_low", d.p_clamp_low);
  p.p_clamp_high = j.value("p_clamp_high", d.p_clamp_high);
  p.filtered = j.value("filtered", d.filtered);
  p.validate();
}

}  // namespace clickrefine
