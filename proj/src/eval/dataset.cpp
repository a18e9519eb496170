#include "clickrefine/eval/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "clickrefine/imageio/png.hpp"
#include "json.hpp"

namespace clickrefine {
namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

nlohmann::json parse_json_file(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

bool any_set(const Mask& m) {
  return std::any_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

std::vector<InstanceRecord> load_manifest(const std::filesystem::path& path) {
  const nlohmann::json j = parse_json_file(path);
  if (!j.is_array()) throw ValidationError("manifest " + path.string() + " must be a JSON array");
  const std::filesystem::path base = path.parent_path();
  std::vector<InstanceRecord> records;
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& item = j[i];
    const std::string where = "record " + std::to_string(i);
    if (!item.is_object() || !item.contains("image") || !item.contains("mask") || !item["image"].is_string() ||
        !item["mask"].is_string()) {
      problems.push_back(where + ": needs string fields image and mask");
      continue;
    }
    InstanceRecord r;
    r.image = resolve(base, item["image"].get<std::string>());
    r.mask = resolve(base, item["mask"].get<std::string>());
    r.instance_id = item.contains("instance_id") ? (item["instance_id"].is_string()
                                                        ? item["instance_id"].get<std::string>()
                                                        : item["instance_id"].dump())
                                                 : std::to_string(i);
    r.source = item.value("source", std::string());
    try {
      load_instance(r);
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      problems.push_back(where + " (" + r.instance_id + "): " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " manifest error(s):";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  return records;
}

Instance load_instance(const InstanceRecord& record) {
  if (!std::filesystem::exists(record.image)) throw ValidationError("missing file " + record.image.string());
  if (!std::filesystem::exists(record.mask)) throw ValidationError("missing file " + record.mask.string());
  Instance inst{record, image_to_array(decode_png_rgb(read_file(record.image))), decode_mask_png(read_file(record.mask))};
  if (inst.gt.dim(0) != inst.image.dim(2) || inst.gt.dim(1) != inst.image.dim(3)) {
    throw ValidationError("mask size " + shape_to_string(inst.gt.shape()) + " does not match image " +
                          shape_to_string(inst.image.shape()));
  }
  if (!any_set(inst.gt)) throw ValidationError("empty instance");
  return inst;
}

Mask rle_decode(const std::vector<std::uint32_t>& counts, std::size_t height, std::size_t width) {
  Mask m({height, width}, 0);
  const std::size_t total = height * width;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (pos + counts[i] > total) throw ValidationError("RLE counts exceed the mask size");
    if (i % 2 == 1) {
      for (std::size_t k = pos; k < pos + counts[i]; ++k) m.at(k % height, k / height) = 1;
    }
    pos += counts[i];
  }
  if (pos != total) throw ValidationError("RLE counts cover " + std::to_string(pos) + " of " + std::to_string(total) + " pixels");
  return m;
}

std::vector<std::uint32_t> rle_string_to_counts(const std::string& text) {
  std::vector<std::int64_t> counts;
  std::size_t p = 0;
  while (p < text.size()) {
    std::int64_t x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= text.size()) throw ValidationError("truncated compressed RLE string");
      const int c = text[p] - 48;
      if (c < 0 || c > 63) throw ValidationError("invalid character in compressed RLE string");
      x |= static_cast<std::int64_t>(c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -(static_cast<std::int64_t>(1) << (5 * k));
    }
    if (counts.size() > 2) x += counts[counts.size() - 2];
    counts.push_back(x);
  }
  std::vector<std::uint32_t> out;
  for (std::int64_t c : counts) {
    if (c < 0 || c > 0xffffffffLL) throw ValidationError("compressed RLE decodes to an invalid run length");
    out.push_back(static_cast<std::uint32_t>(c));
  }
  return out;
}

Mask polygon_to_mask(const std::vector<double>& poly, std::size_t height, std::size_t width) {
  if (poly.size() < 6 || poly.size() % 2) throw ValidationError("polygon needs at least three x,y pairs");
  const std::size_t n = poly.size() / 2;
  Mask m({height, width}, 0);
  for (std::size_t y = 0; y < height; ++y) {
    const double py = y + 0.5;
    for (std::size_t x = 0; x < width; ++x) {
      const double px = x + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = poly[2 * i], yi = poly[2 * i + 1], xj = poly[2 * j], yj = poly[2 * j + 1];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      m.at(y, x) = inside ? 1 : 0;
    }
  }
  return m;
}

std::filesystem::path import_coco(const std::filesystem::path& coco_json, const std::filesystem::path& image_root,
                                  const std::filesystem::path& out_dir) {
  const nlohmann::json j = parse_json_file(coco_json);
  if (!j.contains("images") || !j.contains("annotations")) {
    throw ValidationError("COCO file needs images and annotations arrays");
  }
  struct ImageInfo {
    std::string file;
    std::size_t height, width;
  };
  std::map<std::int64_t, ImageInfo> images;
  for (const auto& im : j["images"]) {
    images[im.at("id").get<std::int64_t>()] = {im.at("file_name").get<std::string>(), im.at("height").get<std::size_t>(),
                                               im.at("width").get<std::size_t>()};
  }
  std::filesystem::create_directories(out_dir / "masks");
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& ann : j["annotations"]) {
    if (ann.value("iscrowd", 0) != 0) continue;
    const auto id = ann.at("id").get<std::int64_t>();
    const auto it = images.find(ann.at("image_id").get<std::int64_t>());
    if (it == images.end()) throw ValidationError("annotation " + std::to_string(id) + " references an unknown image");
    const ImageInfo& info = it->second;
    const auto& seg = ann.at("segmentation");
    Mask mask({info.height, info.width}, 0);
    if (seg.is_array()) {
      for (const auto& poly : seg) {
        const Mask part = polygon_to_mask(poly.get<std::vector<double>>(), info.height, info.width);
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] |= part[i];
      }
    } else {
      const auto size = seg.at("size").get<std::vector<std::size_t>>();
      if (size.size() != 2 || size[0] != info.height || size[1] != info.width) {
        throw ValidationError("annotation " + std::to_string(id) + " RLE size does not match its image");
      }
      const auto& counts = seg.at("counts");
      mask = rle_decode(counts.is_string() ? rle_string_to_counts(counts.get<std::string>())
                                           : counts.get<std::vector<std::uint32_t>>(),
                        info.height, info.width);
    }
    if (!any_set(mask)) continue;
    const std::string name = "ann_" + std::to_string(id) + ".png";
    write_file(out_dir / "masks" / name, encode_mask_png(mask));
    manifest.push_back({{"image", std::filesystem::absolute(resolve(image_root, info.file)).string()},
                        {"mask", "masks/" + name},
                        {"instance_id", std::to_string(id)},
                        {"source", coco_json.filename().string()}});
  }
  const auto path = out_dir / "manifest.json";
  const std::string text = manifest.dump(2) + "\n";
  write_file(path, Bytes(text.begin(), text.end()));
  return path;
}

}  // namespace clickrefine
