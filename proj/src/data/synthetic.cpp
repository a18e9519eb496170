#include "clickrefine/data/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "json.hpp"

#include "clickrefine/core/rng.hpp"
#include "clickrefine/imageio/png.hpp"

namespace clickrefine {
namespace {

using Color = std::array<double, 3>;
struct Point {
  double x, y;
};

std::vector<Point> star_polygon(Rng& rng, double cx, double cy, double radius) {
  const int n = rng.range(5, 10);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  std::vector<Point> pts;
  for (int i = 0; i < n; ++i) {
    const double a = phase + 6.283185307179586 * (i + rng.uniform(-0.3, 0.3)) / n;
    const double r = radius * rng.uniform(0.6, 1.35);
    pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
  }
  return pts;
}

// Even-odd rule at pixel centres.
Mask rasterize(const std::vector<Point>& poly, std::size_t size) {
  Mask m({size, size}, 0);
  for (std::size_t y = 0; y < size; ++y) {
    const double py = y + 0.5;
    for (std::size_t x = 0; x < size; ++x) {
      const double px = x + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Point& a = poly[i];
        const Point& b = poly[j];
        if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) inside = !inside;
      }
      m.at(y, x) = inside ? 1 : 0;
    }
  }
  return m;
}

Color random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

double contrast(const Color& a, const Color& b) {
  double m = 0.0;
  for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(a[c] - b[c]));
  return m;
}

Color distinct_color(Rng& rng, const std::vector<Color>& avoid, double min_contrast) {
  Color c = random_color(rng);
  for (int tries = 0; tries < 64; ++tries) {
    if (std::all_of(avoid.begin(), avoid.end(), [&](const Color& a) { return contrast(a, c) >= min_contrast; })) break;
    c = random_color(rng);
  }
  return c;
}

void paint(Array& image, const Mask& region, const Color& color, double noise, Rng& rng) {
  const std::size_t size = region.dim(0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!region.at(y, x)) continue;
      for (std::size_t c = 0; c < 3; ++c) image.at(0, c, y, x) = static_cast<float>(color[c] + noise * rng.normal());
    }
  }
}

}  // namespace

SyntheticSample synthesize_polygon(std::size_t size, std::uint64_t seed) {
  if (size < 16) throw ValidationError("synthetic images must be at least 16 pixels");
  Rng rng(mix_seed(seed, 0x90179u));
  const double s = static_cast<double>(size);

  // Background: linear blend between two colours plus pixel noise.
  const Color c0 = random_color(rng);
  const Color c1 = random_color(rng);
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double ux = std::cos(angle), uy = std::sin(angle);
  Array image({1, 3, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * ((x / s - 0.5) * ux + (y / s - 0.5) * uy);
      for (std::size_t c = 0; c < 3; ++c) {
        image.at(0, c, y, x) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t + 0.04 * rng.normal());
      }
    }
  }

  std::vector<Color> used{c0, c1};
  const int distractors = rng.range(0, 2);
  for (int i = 0; i < distractors; ++i) {
    const auto poly = star_polygon(rng, rng.uniform(0.1, 0.9) * s, rng.uniform(0.1, 0.9) * s, rng.uniform(0.08, 0.2) * s);
    const Color color = distinct_color(rng, used, 0.2);
    used.push_back(color);
    paint(image, rasterize(poly, size), color, 0.04, rng);
  }

  Mask gt;
  for (int attempt = 0;; ++attempt) {
    const auto poly = star_polygon(rng, rng.uniform(0.3, 0.7) * s, rng.uniform(0.3, 0.7) * s, rng.uniform(0.15, 0.3) * s);
    gt = rasterize(poly, size);
    std::size_t area = 0;
    for (auto v : gt.values()) area += v;
    if (area >= size * size / 50 || attempt > 32) break;
  }
  paint(image, gt, distinct_color(rng, used, 0.3), 0.05, rng);

  // Quantise to 8 bits so in-memory samples equal their PNG round trip.
  image = image_to_array(array_to_image(image));
  return {std::move(image), std::move(gt)};
}

std::vector<SyntheticSample> synthesize_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synthesize_polygon(size, mix_seed(seed, i)));
  return out;
}

std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::size_t size,
                                              std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticSample s = synthesize_polygon(size, mix_seed(seed, i));
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu.png", i);
    write_file(dir / "images" / stem, encode_png(array_to_image(s.image)));
    write_file(dir / "masks" / stem, encode_mask_png(s.gt));
    manifest.push_back({{"image", std::string("images/") + stem},
                        {"mask", std::string("masks/") + stem},
                        {"instance_id", "synthetic-" + std::to_string(i)}});
  }
  const auto path = dir / "manifest.json";
  const std::string text = manifest.dump(2) + "\n";
  write_file(path, Bytes(text.begin(), text.end()));
  return path;
}

}  // namespace clickrefine
