#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "clickrefine/core/array.hpp"
#include "clickrefine/interaction/click.hpp"

namespace clickrefine {

using Bytes = std::vector<std::uint8_t>;

/// Decoded 8-bit image, interleaved channels.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Any PNG expanded to 8-bit RGB (palette/gray/alpha/16-bit are converted).
Image8 decode_png_rgb(const Bytes& png);
// Any PNG reduced to one 8-bit channel (colour images use channel 0).
Image8 decode_png_gray8(const Bytes& png);

Bytes encode_png(const Image8& image);

// 16-bit grayscale, value = round(p * 65535).
Bytes encode_prob_png(const Array& prob);
Array decode_prob_png(const Bytes& png);

// 8-bit grayscale 0/255; decoding binarizes at 128.
Bytes encode_mask_png(const Mask& mask);
Mask decode_mask_png(const Bytes& png);

// RGB in [0, 1] as [1, 3, H, W].
Array image_to_array(const Image8& rgb);
Image8 array_to_image(const Array& image);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Bytes& bytes);

std::string base64_encode(const Bytes& bytes);
Bytes base64_decode(std::string_view text);

}  // namespace clickrefine
