#pragma once

// Binary PPM (P6) images and PGM (P5) masks, maxval 255.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fortress/errors.hpp"
#include "fortress/ops.hpp"
#include "fortress/tensor.hpp"

namespace fortress {

/// One image/mask pair. image is (1, 3, H, W) in [0, 1]; mask is (1, H, W).
struct Sample {
  Tensor<float> image;
  LabelMap mask;
  std::string id;
};

namespace detail {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t payload_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const std::string& what) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw FormatError(what + ": " + field + " too large");
      ++pos;
    }
    if (pos == start) throw FormatError(what + ": missing " + field);
    return v;
  };
  if (bytes.size() < 2) throw FormatError(what + ": file too short");
  h.magic = bytes.substr(0, 2);
  pos = 2;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  // exactly one whitespace byte separates the header from the raster
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(what + ": header not terminated by whitespace");
  }
  h.payload_offset = pos + 1;
  if (h.maxval != 255) throw FormatError(what + ": maxval must be 255, got " + std::to_string(h.maxval));
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("failed writing " + path);
}

inline std::uint8_t to_byte(float v) {
  const double scaled = std::floor(static_cast<double>(v) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

}  // namespace detail

inline Tensor<float> decode_ppm(const std::string& bytes, const std::string& what = "ppm") {
  const auto h = detail::parse_pnm_header(bytes, what);
  if (h.magic != "P6") throw FormatError(what + ": expected P6, got " + h.magic);
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.payload_offset != 3 * n) {
    throw FormatError(what + ": payload has " + std::to_string(bytes.size() - h.payload_offset) + " bytes, expected " +
                      std::to_string(3 * n));
  }
  Tensor<float> img({1, 3, h.height, h.width});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.payload_offset);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) img[c * n + i] = static_cast<float>(p[3 * i + c]) / 255.0f;
  return img;
}

inline std::string encode_ppm(const Tensor<float>& img) {
  const Shape s = img.shape();
  if (s.n != 1 || s.c != 3) throw ConfigError("encode_ppm expects a (1,3,H,W) image, got " + s.str());
  std::string out = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  const std::size_t n = s.plane();
  out.reserve(out.size() + 3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(detail::to_byte(img[c * n + i])));
  return out;
}

inline LabelMap decode_pgm(const std::string& bytes, const std::string& what = "pgm") {
  const auto h = detail::parse_pnm_header(bytes, what);
  if (h.magic != "P5") throw FormatError(what + ": expected P5, got " + h.magic);
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.payload_offset != n) {
    throw FormatError(what + ": payload has " + std::to_string(bytes.size() - h.payload_offset) + " bytes, expected " +
                      std::to_string(n));
  }
  LabelMap m(1, h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.payload_offset);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = p[i];
  return m;
}

inline std::string encode_pgm(const LabelMap& mask) {
  if (mask.n != 1) throw ConfigError("encode_pgm expects a single mask");
  std::string out = "P5\n" + std::to_string(mask.w) + " " + std::to_string(mask.h) + "\n255\n";
  for (auto v : mask.data) {
    if (v < 0 || v > 255) throw DataError("mask value " + std::to_string(v) + " does not fit in a byte");
    out.push_back(static_cast<char>(v));
  }
  return out;
}

inline Tensor<float> read_image(const std::string& path) { return decode_ppm(detail::read_file(path), path); }
inline void write_image(const std::string& path, const Tensor<float>& img) { detail::write_file(path, encode_ppm(img)); }
inline LabelMap read_mask(const std::string& path) { return decode_pgm(detail::read_file(path), path); }
inline void write_mask(const std::string& path, const LabelMap& mask) { detail::write_file(path, encode_pgm(mask)); }

}  // namespace fortress
