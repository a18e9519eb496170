#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "json.hpp"

namespace clickrefine {

enum class ClickKind : int { negative = 0, positive = 1 };

struct Click {
  int x = 0;  // column
  int y = 0;  // row
  ClickKind kind = ClickKind::positive;
  int ordinal = 0;

  bool positive() const noexcept { return kind == ClickKind::positive; }
  friend bool operator==(const Click&, const Click&) = default;
};

// Binary H x W masks (values 0/1).
using Mask = BasicArray<std::uint8_t>;

void validate_click(const Click& click, std::size_t height, std::size_t width);

void to_json(nlohmann::json& j, const Click& c);
void from_json(const nlohmann::json& j, Click& c);

// [2, H, W]: channel 0 positive disks, channel 1 negative disks.
Array encode_clicks(const std::vector<Click>& clicks, std::size_t height, std::size_t width, int disk_radius);

// max(1, round(5 * H / 448))
int default_disk_radius(std::size_t height);

// Euclidean distance of every pixel to the nearest zero pixel, with the image
// frame counted as zero. Exact (separable lower-envelope transform).
Array64 distance_transform(const Mask& mask);

template <typename T>
Mask binarize(const BasicArray<T>& prob, double threshold = 0.5);

// Largest-error-region simulator. Empty result means pred already equals gt
// or every error pixel has been clicked.
std::optional<Click> next_click(const Mask& pred, const Mask& gt, const std::vector<Click>& prior_clicks);

struct ClickSamplerConfig {
  int initial_positive = 1;
  int initial_negative = 0;
  int max_clicks = 24;
  int margin = 3;  // minimum interior distance for randomly drawn clicks
};

// Training clicks for one round. Round 1 draws the initial random clicks; later
// rounds append one simulator click against the thresholded prediction (or a
// random interior positive when nothing is left to correct).
std::vector<Click> sample_training_clicks(const Mask& gt, const Array* current_pred,
                                          const std::vector<Click>& prior_clicks, int round, std::uint64_t seed,
                                          const ClickSamplerConfig& config = {});

}  // namespace clickrefine
