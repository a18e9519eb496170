#pragma once

#include <filesystem>

#include "clickrefine/engine/params.hpp"

namespace clickrefine {

// Manifest JSON (entries with name, shape, dtype "f32", byte offset, trainable)
// plus a little-endian float blob next to it, named after the manifest stem.
void save_weights(const ParamSet& params, const std::filesystem::path& manifest_path);
ParamSet load_weights(const std::filesystem::path& manifest_path);

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path);

}  // namespace clickrefine
