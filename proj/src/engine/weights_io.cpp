#include "clickrefine/engine/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace clickrefine {
namespace {

using nlohmann::json;

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
  std::filesystem::path blob = manifest_path;
  blob.replace_extension(".bin");
  return blob;
}

void save_weights(const ParamSet& params, const std::filesystem::path& manifest_path) {
  const auto blob = blob_path_for(manifest_path);
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + blob.string());

  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : params.entries()) {
    for (float v : e.value.values()) {
      const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    entries.push_back({{"name", e.name},
                       {"shape", e.value.shape()},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"trainable", e.trainable}});
    offset += e.value.size() * sizeof(float);
  }
  if (!out) throw ValidationError("failed writing " + blob.string());

  const json manifest = {{"blob", blob.filename().string()}, {"entries", entries}};
  std::ofstream m(manifest_path);
  if (!m) throw ValidationError("cannot write " + manifest_path.string());
  m << manifest.dump(2) << "\n";
}

ParamSet load_weights(const std::filesystem::path& manifest_path) {
  std::ifstream m(manifest_path);
  if (!m) throw ValidationError("cannot read " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(m);
  } catch (const json::exception& e) {
    throw ValidationError("malformed weight manifest " + manifest_path.string() + ": " + e.what());
  }

  const auto blob_path = manifest_path.parent_path() / manifest.value("blob", blob_path_for(manifest_path).filename().string());
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + blob_path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();

  ParamSet params;
  for (const auto& e : manifest.at("entries")) {
    if (e.at("dtype").get<std::string>() != "f32") throw ValidationError("unsupported dtype in weight manifest");
    const Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > bytes.size()) {
      throw ValidationError("weight blob too short for " + e.at("name").get<std::string>());
    }
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + offset + i * sizeof bits, sizeof bits);
      values[i] = std::bit_cast<float>(to_little(bits));
    }
    params.add(e.at("name").get<std::string>(), Array(shape, std::move(values)), e.value("trainable", false));
  }
  return params;
}

}  // namespace clickrefine
