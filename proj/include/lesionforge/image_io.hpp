#ifndef LESIONFORGE_IMAGE_IO_HPP
#define LESIONFORGE_IMAGE_IO_HPP

// 8-bit PNG and binary PPM/PGM. Samples convert as v/255 on read and
// round(v*255) on write.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "lesionforge/detail/binary_io.hpp"
#include "lesionforge/error.hpp"
#include "lesionforge/imaging.hpp"

namespace lesionforge {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0));
}

inline std::vector<std::uint8_t> to_bytes(const ImagePlane& img) {
  std::vector<std::uint8_t> out(img.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_byte(img.data()[i]);
  return out;
}

inline ImagePlane from_bytes(std::size_t h, std::size_t w, std::size_t c, const std::uint8_t* bytes) {
  std::vector<double> data(h * w * c);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = double(bytes[i]) / 255.0;
  return ImagePlane(h, w, c, std::move(data));
}

inline std::vector<std::uint8_t> encode_png(const ImagePlane& img) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto pixels = to_bytes(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

/// Gray PNGs load as 1 channel, anything with color as RGB; alpha is dropped.
inline ImagePlane decode_png(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw FormatError("cannot decode PNG " + origin + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError("cannot decode PNG " + origin + ": " + png.message);
  }
  return from_bytes(png.height, png.width, color ? 3 : 1, pixels.data());
}

inline std::vector<std::uint8_t> encode_ppm(const ImagePlane& img) {
  std::ostringstream head;
  head << (img.channels() == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
  const auto h = head.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  const auto px = to_bytes(img);
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

inline ImagePlane decode_ppm(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (!digits) throw FormatError("malformed PPM header in " + origin);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw FormatError(origin + " is not a binary PPM/PGM");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const auto w = number(), h = number(), maxval = number();
  if (maxval != 255) throw FormatError(origin + ": only 8-bit PPM is supported");
  ++pos;  // single whitespace before raster
  if (w == 0 || h == 0 || bytes.size() < pos + w * h * channels) {
    throw FormatError(origin + ": truncated PPM raster");
  }
  return from_bytes(h, w, channels, bytes.data() + pos);
}

inline ImagePlane read_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
    return decode_png(bytes, path.string());
  }
  return decode_ppm(bytes, path.string());
}

/// Format follows the extension: .ppm/.pgm write PPM, anything else PNG.
inline void write_image(const ImagePlane& img, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  detail::write_file_atomic(path, (ext == ".ppm" || ext == ".pgm") ? encode_ppm(img) : encode_png(img));
}

}  // namespace lesionforge

#endif  // LESIONFORGE_IMAGE_IO_HPP
