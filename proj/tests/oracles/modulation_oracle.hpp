#pragma once

// Per-pixel scalar reimplementation of radius selection, window filtering and
// gamma adjustment. Scans the whole image instead of a bounding box and keeps
// no intermediate window structure.

#include <algorithm>
#include <cmath>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/interaction/click.hpp"

namespace clickrefine::oracle {

inline double radius(const Click& u, const std::vector<Click>& clicks, double r_max, double r_min) {
  double best = -1.0;
  for (const Click& c : clicks) {
    if (c.kind == u.kind) continue;
    const double d = std::sqrt(double(c.x - u.x) * (c.x - u.x) + double(c.y - u.y) * (c.y - u.y));
    if (best < 0 || d < best) best = d;
  }
  const double r = best < 0 ? r_max : best / 2.0;
  return r < r_min ? r_min : r;
}

inline Array64 modulate(const Array64& prob, const Click& u, const std::vector<Click>& clicks, double r_max = 100.0,
                        double r_min = 5.0) {
  const std::size_t h = prob.dim(0), w = prob.dim(1);
  const double R = radius(u, clicks, r_max, r_min);
  auto dist = [&](std::size_t y, std::size_t x) {
    const double dx = double(x) - u.x, dy = double(y) - u.y;
    return std::sqrt(dx * dx + dy * dy);
  };

  double total = 0.0;
  std::vector<double> inside;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (dist(y, x) <= R) {
        total += prob[y * w + x];
        inside.push_back(prob[y * w + x]);
      }
  const double mean = total / double(inside.size());
  const std::size_t mid = (inside.size() - 1) / 2;
  std::nth_element(inside.begin(), inside.begin() + static_cast<long>(mid), inside.end());
  const double median = inside[mid];
  const double pu = prob[std::size_t(u.y) * w + std::size_t(u.x)];
  const double bound = u.positive() ? std::min(pu, std::min(mean, median)) : std::max(pu, std::max(mean, median));
  const double puc = pu < 0.01 ? 0.01 : (pu > 0.99 ? 0.99 : pu);

  Array64 out = prob;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double d = dist(y, x);
      const double p = prob[y * w + x];
      if (d > R) continue;
      if (u.positive() ? !(p >= bound) : !(p <= bound)) continue;
      if (u.positive()) {
        const double gmax = std::log(puc) / std::log(0.99);
        const double g = gmax * (1.0 - d / R) + d / R;
        out[y * w + x] = std::pow(p, 1.0 / g);
      } else {
        const double gmax = std::log(0.01) / std::log(puc);
        const double g = gmax * (1.0 - d / R) + d / R;
        out[y * w + x] = std::pow(p, g);
      }
    }
  return out;
}

}  // namespace clickrefine::oracle
