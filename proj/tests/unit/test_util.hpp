#pragma once

#include <cstdint>

#include "clickrefine/core/array.hpp"
#include "clickrefine/core/rng.hpp"

namespace clickrefine::testing {

template <typename T>
BasicArray<T> random_array(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  BasicArray<T> a(shape);
  for (auto& v : a.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return a;
}

template <typename T>
double max_abs_diff(const BasicArray<T>& a, const BasicArray<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace clickrefine::testing
