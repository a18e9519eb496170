#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/interaction/click.hpp"

namespace clickrefine {

struct InstanceRecord {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::string instance_id;
  std::string source;
};

struct Instance {
  InstanceRecord record;
  Array image;  // [1, 3, H, W]
  Mask gt;      // [H, W], 0/1
};

// JSON array of {image, mask, instance_id[, source]}. Relative paths resolve
// against the manifest's directory. Every record is loaded and checked; all
// problems are reported together in one ValidationError.
std::vector<InstanceRecord> load_manifest(const std::filesystem::path& path);

Instance load_instance(const InstanceRecord& record);

// COCO run-length encoding, column-major, starting with a background run.
Mask rle_decode(const std::vector<std::uint32_t>& counts, std::size_t height, std::size_t width);
// The compressed string form of COCO counts.
std::vector<std::uint32_t> rle_string_to_counts(const std::string& text);
// Polygon as flat [x0, y0, x1, y1, ...], filled by the even-odd rule at pixel centres.
Mask polygon_to_mask(const std::vector<double>& polygon, std::size_t height, std::size_t width);

// Converts every non-crowd annotation of a COCO JSON file into a mask PNG under
// out_dir/masks and writes out_dir/manifest.json. Image paths resolve against
// image_root. Returns the manifest path.
std::filesystem::path import_coco(const std::filesystem::path& coco_json, const std::filesystem::path& image_root,
                                  const std::filesystem::path& out_dir);

}  // namespace clickrefine
