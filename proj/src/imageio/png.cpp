#include "clickrefine/imageio/png.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace clickrefine {
namespace {

struct ReadCursor {
  const Bytes* bytes;
  std::size_t offset;
};

void read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes->size()) png_error(png, "truncated PNG data");
  std::memcpy(out, cursor->bytes->data() + cursor->offset, length);
  cursor->offset += length;
}

void write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_callback(png_structp) {}

[[noreturn]] void error_callback(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  *text = message;
  png_longjmp(png, 1);
}

void warning_callback(png_structp, png_const_charp) {}

constexpr std::size_t kMaxSide = 1u << 14;

// Raw decode; `keep16` preserves 16-bit gray samples, otherwise everything is
// reduced to 8 bits per channel.
struct Raw {
  std::size_t height = 0, width = 0, channels = 0, bit_depth = 8;
  std::vector<std::uint8_t> data;  // big-endian samples when 16-bit
};

Raw decode(const Bytes& bytes, bool keep16, bool to_rgb) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ValidationError("not a PNG payload");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, error_callback, warning_callback);
  if (!png) throw ValidationError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ValidationError("libpng initialisation failed");
  }
  ReadCursor cursor{&bytes, 0};
  Raw raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("PNG decode failed: " + message);
  }
  png_set_read_fn(png, &cursor, read_callback);
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  if (width == 0 || height == 0 || width > kMaxSide || height > kMaxSide) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("PNG dimensions out of range");
  }
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (!(keep16 && depth == 16)) png_set_strip_16(png);
  const bool colour = color == PNG_COLOR_TYPE_PALETTE || (color & PNG_COLOR_MASK_COLOR);
  if (to_rgb && !colour) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  raw.height = height;
  raw.width = width;
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.data.resize(stride * height);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = raw.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

Bytes encode(std::size_t height, std::size_t width, int color_type, int bit_depth, const std::uint8_t* data,
             std::size_t stride) {
  if (height == 0 || width == 0) throw ValidationError("cannot encode an empty image");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, error_callback, warning_callback);
  if (!png) throw ValidationError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ValidationError("libpng initialisation failed");
  }
  Bytes out;
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ValidationError("PNG encode failed: " + message);
  }
  png_set_write_fn(png, &out, write_callback, flush_callback);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(data + y * stride);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

Image8 decode_png_rgb(const Bytes& png) {
  Raw raw = decode(png, false, true);
  return Image8{raw.height, raw.width, 3, std::move(raw.data)};
}

Image8 decode_png_gray8(const Bytes& png) {
  const Raw raw = decode(png, false, false);
  Image8 out{raw.height, raw.width, 1, std::vector<std::uint8_t>(raw.height * raw.width)};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = raw.data[i * raw.channels];
  return out;
}

Bytes encode_png(const Image8& image) {
  int color = 0;
  switch (image.channels) {
    case 1: color = PNG_COLOR_TYPE_GRAY; break;
    case 3: color = PNG_COLOR_TYPE_RGB; break;
    case 4: color = PNG_COLOR_TYPE_RGBA; break;
    default: throw ValidationError("unsupported channel count for PNG encode");
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw DimensionError("image pixel buffer does not match its dimensions");
  }
  return encode(image.height, image.width, color, 8, image.pixels.data(), image.width * image.channels);
}

Bytes encode_prob_png(const Array& prob) {
  if (prob.rank() != 2) throw DimensionError("probability map must be H x W");
  const std::size_t h = prob.dim(0), w = prob.dim(1);
  std::vector<std::uint8_t> data(h * w * 2);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double p = std::clamp(static_cast<double>(prob[i]), 0.0, 1.0);
    const auto v = static_cast<std::uint16_t>(std::lround(p * 65535.0));
    data[2 * i] = static_cast<std::uint8_t>(v >> 8);
    data[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  return encode(h, w, PNG_COLOR_TYPE_GRAY, 16, data.data(), w * 2);
}

Array decode_prob_png(const Bytes& png) {
  const Raw raw = decode(png, true, false);
  Array out({raw.height, raw.width});
  for (std::size_t i = 0; i < raw.height * raw.width; ++i) {
    if (raw.bit_depth == 16) {
      const std::size_t o = i * raw.channels * 2;
      const unsigned v = (static_cast<unsigned>(raw.data[o]) << 8) | raw.data[o + 1];
      out[i] = static_cast<float>(v / 65535.0);
    } else {
      out[i] = static_cast<float>(raw.data[i * raw.channels] / 255.0);
    }
  }
  return out;
}

Bytes encode_mask_png(const Mask& mask) {
  if (mask.rank() != 2) throw DimensionError("mask must be H x W");
  Image8 img{mask.dim(0), mask.dim(1), 1, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return encode_png(img);
}

Mask decode_mask_png(const Bytes& png) {
  const Image8 img = decode_png_gray8(png);
  Mask out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] >= 128 ? 1 : 0;
  return out;
}

Array image_to_array(const Image8& rgb) {
  if (rgb.channels != 3) throw DimensionError("expected an RGB image");
  const std::size_t h = rgb.height, w = rgb.width;
  Array out({1, 3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) out[c * h * w + i] = static_cast<float>(rgb.pixels[i * 3 + c] / 255.0);
  return out;
}

Image8 array_to_image(const Array& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) throw DimensionError("expected [1, 3, H, W]");
  const std::size_t h = image.dim(2), w = image.dim(3);
  Image8 out{h, w, 3, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = std::clamp(static_cast<double>(image[c * h * w + i]), 0.0, 1.0);
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing " + path.string());
}

std::string base64_encode(const Bytes& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes base64_decode(std::string_view text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ' && c != '\t') clean.push_back(c);
  }
  if (const auto comma = clean.find(','); clean.rfind("data:", 0) == 0 && comma != std::string::npos) {
    clean.erase(0, comma + 1);
  }
  if (clean.size() % 4 != 0) throw ValidationError("base64 payload length is not a multiple of 4");
  Bytes out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw ValidationError("invalid base64 payload");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock counts padding bytes as output; drop them.
  if (!clean.empty() && clean.back() == '=') --len;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

}  // namespace clickrefine
