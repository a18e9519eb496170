#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/interaction/click.hpp"

namespace clickrefine {

struct SyntheticSample {
  Array image;  // [1, 3, H, W] in [0, 1]
  Mask gt;      // [H, W], 0/1
};

// Star-shaped target polygon over a smooth noisy background with up to two
// distractor polygons drawn underneath it. Deterministic in `seed`.
SyntheticSample synthesize_polygon(std::size_t size, std::uint64_t seed);

std::vector<SyntheticSample> synthesize_dataset(std::size_t count, std::size_t size, std::uint64_t seed);

// Writes images/NNNN.png, masks/NNNN.png and manifest.json under `dir`.
// Returns the manifest path.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::size_t size,
                                              std::uint64_t seed);

}  // namespace clickrefine
