#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "fortress/dataio/pnm.hpp"
#include "fortress/rng.hpp"

namespace fortress {

inline Sample hflip(const Sample& s) {
  Sample out = s;
  const Shape sh = s.image.shape();
  for (std::size_t c = 0; c < sh.c; ++c)
    for (std::size_t y = 0; y < sh.h; ++y)
      for (std::size_t x = 0; x < sh.w; ++x) out.image.at(0, c, y, x) = s.image.at(0, c, y, sh.w - 1 - x);
  for (std::size_t y = 0; y < s.mask.h; ++y)
    for (std::size_t x = 0; x < s.mask.w; ++x) out.mask.at(0, y, x) = s.mask.at(0, y, s.mask.w - 1 - x);
  return out;
}

/// Rotation about the image centre by `degrees` (counter-clockwise). Image
/// samples bilinearly with edge clamping; the mask samples nearest and pads
/// with class 0.
inline Sample rotate(const Sample& s, double degrees) {
  Sample out = s;
  const Shape sh = s.image.shape();
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(sh.h) - 1) / 2, cx = (static_cast<double>(sh.w) - 1) / 2;
  const auto H = static_cast<double>(sh.h), W = static_cast<double>(sh.w);
  for (std::size_t y = 0; y < sh.h; ++y)
    for (std::size_t x = 0; x < sh.w; ++x) {
      // inverse map: output pixel -> source location
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;

      const double fx = std::clamp(sx, 0.0, W - 1), fy = std::clamp(sy, 0.0, H - 1);
      const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
      const std::size_t x1 = std::min(x0 + 1, sh.w - 1), y1 = std::min(y0 + 1, sh.h - 1);
      const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
      for (std::size_t c = 0; c < sh.c; ++c) {
        const double top = (1 - ax) * s.image.at(0, c, y0, x0) + ax * s.image.at(0, c, y0, x1);
        const double bot = (1 - ax) * s.image.at(0, c, y1, x0) + ax * s.image.at(0, c, y1, x1);
        out.image.at(0, c, y, x) = static_cast<float>((1 - ay) * top + ay * bot);
      }

      const double rx = std::round(sx), ry = std::round(sy);
      out.mask.at(0, y, x) = (rx < 0 || ry < 0 || rx > W - 1 || ry > H - 1)
                                 ? 0
                                 : s.mask.at(0, static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
    }
  return out;
}

/// Per-channel 256-bin histogram equalization of the image; the mask is untouched.
/// A constant channel maps to itself.
inline Sample histeq(const Sample& s) {
  Sample out = s;
  const Shape sh = s.image.shape();
  const std::size_t n = sh.plane();
  for (std::size_t c = 0; c < sh.c; ++c) {
    const auto src = s.image.plane(0, c);
    auto dst = out.image.plane(0, c);
    std::array<std::size_t, 256> hist{};
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) {
      bytes[i] = detail::to_byte(src[i]);
      ++hist[bytes[i]];
    }
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0, cdf_min = 0;
    for (std::size_t v = 0; v < 256; ++v) {
      run += hist[v];
      cdf[v] = run;
      if (cdf_min == 0 && run > 0) cdf_min = run;
    }
    if (n == cdf_min) continue;  // degenerate histogram
    const double den = static_cast<double>(n - cdf_min);
    for (std::size_t i = 0; i < n; ++i) {
      const double mapped = std::round(static_cast<double>(cdf[bytes[i]] - cdf_min) / den * 255.0);
      dst[i] = static_cast<float>(mapped / 255.0);
    }
  }
  return out;
}

inline const std::vector<std::string>& augment_op_names() {
  static const std::vector<std::string> names{"hflip", "rot30", "rot50", "histeq"};
  return names;
}

inline void check_augment_ops(const std::vector<std::string>& ops) {
  for (const auto& op : ops) {
    bool known = false;
    for (const auto& n : augment_op_names()) known = known || n == op;
    if (!known) throw ConfigError("unknown augmentation '" + op + "' (expected hflip, rot30, rot50 or histeq)");
  }
}

/// Applies each listed op with probability 1/2, in list order. Rotations pick
/// the sign of the angle at random.
inline Sample augment(const Sample& s, const std::vector<std::string>& ops, Rng& rng) {
  check_augment_ops(ops);
  Sample out = s;
  for (const auto& op : ops) {
    if (!rng.bernoulli(0.5)) continue;
    if (op == "hflip") {
      out = hflip(out);
    } else if (op == "rot30" || op == "rot50") {
      const double deg = op == "rot30" ? 30.0 : 50.0;
      out = rotate(out, rng.bernoulli(0.5) ? deg : -deg);
    } else {
      out = histeq(out);
    }
  }
  return out;
}

}  // namespace fortress
