#include "clickrefine/interaction/click.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "clickrefine/core/rng.hpp"

namespace clickrefine {

void validate_click(const Click& click, std::size_t height, std::size_t width) {
  if (click.x < 0 || click.y < 0 || static_cast<std::size_t>(click.x) >= width ||
      static_cast<std::size_t>(click.y) >= height) {
    throw ValidationError("click (" + std::to_string(click.x) + ", " + std::to_string(click.y) +
                          ") outside a " + std::to_string(height) + "x" + std::to_string(width) + " image");
  }
}

void to_json(nlohmann::json& j, const Click& c) {
  j = {{"x", c.x}, {"y", c.y}, {"kind", c.positive() ? "pos" : "neg"}, {"ordinal", c.ordinal}};
}

void from_json(const nlohmann::json& j, Click& c) {
  c.x = j.at("x").get<int>();
  c.y = j.at("y").get<int>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "pos" || kind == "positive") {
    c.kind = ClickKind::positive;
  } else if (kind == "neg" || kind == "negative") {
    c.kind = ClickKind::negative;
  } else {
    throw ValidationError("click kind must be \"pos\" or \"neg\", got \"" + kind + "\"");
  }
  c.ordinal = j.value("ordinal", 0);
}

Array encode_clicks(const std::vector<Click>& clicks, std::size_t height, std::size_t width, int disk_radius) {
  Array map({2, height, width}, 0.0f);
  const long r = std::max(0, disk_radius);
  for (const Click& c : clicks) {
    validate_click(c, height, width);
    float* plane = map.data() + (c.positive() ? 0 : height * width);
    for (long dy = -r; dy <= r; ++dy) {
      for (long dx = -r; dx <= r; ++dx) {
        if (dx * dx + dy * dy > r * r) continue;
        const long y = c.y + dy, x = c.x + dx;
        if (y < 0 || x < 0 || y >= static_cast<long>(height) || x >= static_cast<long>(width)) continue;
        plane[y * static_cast<long>(width) + x] = 1.0f;
      }
    }
  }
  return map;
}

int default_disk_radius(std::size_t height) {
  return std::max(1, static_cast<int>(std::lround(5.0 * static_cast<double>(height) / 448.0)));
}

namespace {

constexpr double kFar = 1e20;

// 1-D squared distance transform of f (Felzenszwalb & Huttenlocher).
void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

Array64 distance_transform(const Mask& mask) {
  if (mask.rank() != 2) throw DimensionError("distance_transform: mask must be H x W");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const std::size_t ph = h + 2, pw = w + 2;
  std::vector<double> grid(ph * pw, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) grid[(y + 1) * pw + x + 1] = mask[y * w + x] ? kFar : 0.0;

  const std::size_t n = std::max(ph, pw);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(ph);
  d.resize(ph);
  for (std::size_t x = 0; x < pw; ++x) {
    for (std::size_t y = 0; y < ph; ++y) f[y] = grid[y * pw + x];
    dt1d(f, d, v, z);
    for (std::size_t y = 0; y < ph; ++y) grid[y * pw + x] = d[y];
  }
  f.resize(pw);
  d.resize(pw);
  for (std::size_t y = 0; y < ph; ++y) {
    for (std::size_t x = 0; x < pw; ++x) f[x] = grid[y * pw + x];
    dt1d(f, d, v, z);
    for (std::size_t x = 0; x < pw; ++x) grid[y * pw + x] = d[x];
  }

  Array64 out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = std::sqrt(grid[(y + 1) * pw + x + 1]);
  return out;
}

template <typename T>
Mask binarize(const BasicArray<T>& prob, double threshold) {
  Mask out(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
  return out;
}

template Mask binarize(const Array&, double);
template Mask binarize(const Array64&, double);

namespace {

int next_ordinal(const std::vector<Click>& clicks) {
  int m = 0;
  for (const Click& c : clicks) m = std::max(m, c.ordinal);
  return m + 1;
}

// Deepest unclicked pixel of region; first in (y, x) order on ties.
std::optional<Click> deepest_point(const Mask& region, const std::vector<Click>& prior, ClickKind kind) {
  const std::size_t h = region.dim(0), w = region.dim(1);
  const Array64 dist = distance_transform(region);
  std::vector<std::uint8_t> taken(h * w, 0);
  for (const Click& c : prior) {
    if (c.x >= 0 && c.y >= 0 && static_cast<std::size_t>(c.y) < h && static_cast<std::size_t>(c.x) < w) {
      taken[static_cast<std::size_t>(c.y) * w + static_cast<std::size_t>(c.x)] = 1;
    }
  }
  double best = 0.0;
  std::optional<Click> pick;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      if (!region[i] || taken[i]) continue;
      if (dist[i] > best) {
        best = dist[i];
        pick = Click{static_cast<int>(x), static_cast<int>(y), kind, next_ordinal(prior)};
      }
    }
  }
  return pick;
}

}  // namespace

std::optional<Click> next_click(const Mask& pred, const Mask& gt, const std::vector<Click>& prior_clicks) {
  if (pred.shape() != gt.shape() || pred.rank() != 2) {
    throw DimensionError("next_click: pred " + shape_to_string(pred.shape()) + " vs gt " +
                         shape_to_string(gt.shape()));
  }
  Mask fn(gt.shape()), fp(gt.shape());
  std::size_t n_fn = 0, n_fp = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    fn[i] = gt[i] && !pred[i];
    fp[i] = pred[i] && !gt[i];
    n_fn += fn[i];
    n_fp += fp[i];
  }
  if (n_fn == 0 && n_fp == 0) return std::nullopt;
  const bool use_fn = n_fn >= n_fp;
  if (auto c = deepest_point(use_fn ? fn : fp, prior_clicks, use_fn ? ClickKind::positive : ClickKind::negative)) {
    return c;
  }
  return deepest_point(use_fn ? fp : fn, prior_clicks, use_fn ? ClickKind::negative : ClickKind::positive);
}

namespace {

std::optional<Click> random_interior(const Mask& region, const std::vector<Click>& prior, ClickKind kind, int margin,
                                     Rng& rng) {
  const std::size_t w = region.dim(1);
  const Array64 dist = distance_transform(region);
  std::vector<std::size_t> deep, any;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region[i]) continue;
    const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
    const bool taken = std::any_of(prior.begin(), prior.end(), [&](const Click& c) { return c.x == x && c.y == y; });
    if (taken) continue;
    any.push_back(i);
    if (dist[i] >= margin) deep.push_back(i);
  }
  const auto& pool = deep.empty() ? any : deep;
  if (pool.empty()) return std::nullopt;
  const std::size_t i = pool[rng.below(pool.size())];
  return Click{static_cast<int>(i % w), static_cast<int>(i / w), kind, next_ordinal(prior)};
}

}  // namespace

std::vector<Click> sample_training_clicks(const Mask& gt, const Array* current_pred,
                                          const std::vector<Click>& prior_clicks, int round, std::uint64_t seed,
                                          const ClickSamplerConfig& config) {
  if (round < 1) throw ValidationError("sample_training_clicks: round must be >= 1");
  if (config.max_clicks < 1 || config.max_clicks > 24) throw ConfigError("max_clicks must be in [1, 24]");
  if (std::none_of(gt.values().begin(), gt.values().end(), [](std::uint8_t v) { return v != 0; })) {
    throw ValidationError("sample_training_clicks: empty ground-truth mask");
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(round)));
  std::vector<Click> clicks = round == 1 ? std::vector<Click>{} : prior_clicks;
  const auto full = [&] { return static_cast<int>(clicks.size()) >= config.max_clicks; };

  if (round == 1) {
    Mask background(gt.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) background[i] = gt[i] ? 0 : 1;
    for (int i = 0; i < config.initial_positive && !full(); ++i) {
      if (auto c = random_interior(gt, clicks, ClickKind::positive, config.margin, rng)) clicks.push_back(*c);
    }
    for (int i = 0; i < config.initial_negative && !full(); ++i) {
      if (auto c = random_interior(background, clicks, ClickKind::negative, config.margin, rng)) clicks.push_back(*c);
    }
    return clicks;
  }

  if (full()) return clicks;
  const Mask pred = current_pred ? binarize(*current_pred) : Mask(gt.shape(), 0);
  if (pred.shape() != gt.shape()) throw DimensionError("sample_training_clicks: prediction shape mismatch");
  if (auto c = next_click(pred, gt, clicks)) {
    clicks.push_back(*c);
  } else if (auto r = random_interior(gt, clicks, ClickKind::positive, config.margin, rng)) {
    clicks.push_back(*r);
  }
  return clicks;
}

}  // namespace clickrefine
