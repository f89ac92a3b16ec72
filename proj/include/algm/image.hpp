#pragma once

#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "algm/errors.hpp"

namespace algm {

// H x W x 3 floats, interleaved RGB, row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0F) : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) noexcept { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const noexcept { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

namespace detail {

inline std::size_t ppm_header_int(std::istream& in, const std::string& path) {
  int ch = in.get();
  for (;;) {
    while (ch != EOF && std::isspace(ch)) ch = in.get();
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
      continue;
    }
    break;
  }
  if (ch == EOF || !std::isdigit(ch)) throw IoError(path + ": malformed PPM header");
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    if (v > (1U << 20)) throw IoError(path + ": PPM header value too large");
    ch = in.get();
  }
  // Exactly one whitespace byte separates the header from the raster.
  if (ch == EOF || !std::isspace(ch)) throw IoError(path + ": malformed PPM header");
  return v;
}

}  // namespace detail

// 8-bit binary PPM (P6), scaled to [0, 1].
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  char magic[2] = {};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '6') {
    throw IoError(path.string() + ": not a binary PPM (P6) file");
  }
  const auto w = detail::ppm_header_int(in, path.string());
  const auto h = detail::ppm_header_int(in, path.string());
  const auto maxval = detail::ppm_header_int(in, path.string());
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw IoError(path.string() + ": only 8-bit PPM with nonzero size is supported");
  }
  Image img(h, w);
  std::vector<unsigned char> raw(h * w * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError(path.string() + ": truncated PPM raster");
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
  return img;
}

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) {
    const float c = v < 0.0F ? 0.0F : (v > 1.0F ? 1.0F : v);
    out.put(static_cast<char>(static_cast<unsigned char>(c * 255.0F + 0.5F)));
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace algm
