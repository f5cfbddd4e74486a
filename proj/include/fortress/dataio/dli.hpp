#pragma once

// Dynamic label injection: cut-paste of minority-class defect patches into
// background regions, with a linear alpha ramp around the pasted support.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "fortress/dataio/pnm.hpp"
#include "fortress/rng.hpp"

namespace fortress {

/// A defect crop. mask holds `cls` on the defect support and 0 elsewhere;
/// image keeps the source surroundings inside the crop.
struct Patch {
  Tensor<float> image;  // (1, 3, h, w)
  LabelMap mask;        // (1, h, w)
  std::int32_t cls = 0;

  std::size_t support() const {
    return static_cast<std::size_t>(std::count(mask.data.begin(), mask.data.end(), cls));
  }
};

using PatchBank = std::vector<Patch>;

struct DliOptions {
  std::size_t max_patches = 3;
  bool flip = true;
  bool rotate = true;  // multiples of 90 degrees
  bool scale = true;   // nearest resampling by 0.75, 1 or 1.5
  std::size_t feather = 3;
  std::size_t attempts = 40;
};

struct DliResult {
  Sample sample;
  std::size_t injected = 0;
  bool no_room = false;  // a patch was chosen but no background region could hold it
};

namespace detail {

inline Patch flip_patch(const Patch& p) {
  Patch out = p;
  const Shape s = p.image.shape();
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, y, x) = p.image.at(0, c, y, s.w - 1 - x);
      out.mask.at(0, y, x) = p.mask.at(0, y, s.w - 1 - x);
    }
  return out;
}

// 90 degrees clockwise
inline Patch rot90_patch(const Patch& p) {
  const Shape s = p.image.shape();
  Patch out{Tensor<float>({1, 3, s.w, s.h}), LabelMap(1, s.w, s.h), p.cls};
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) {
      const std::size_t ny = x, nx = s.h - 1 - y;
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, ny, nx) = p.image.at(0, c, y, x);
      out.mask.at(0, ny, nx) = p.mask.at(0, y, x);
    }
  return out;
}

inline Patch scale_patch(const Patch& p, double f) {
  const Shape s = p.image.shape();
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.h) * f)));
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.w) * f)));
  Patch out{Tensor<float>({1, 3, h, w}), LabelMap(1, h, w), p.cls};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = std::min(s.h - 1, (y * s.h) / h), sx = std::min(s.w - 1, (x * s.w) / w);
      for (std::size_t c = 0; c < 3; ++c) out.image.at(0, c, y, x) = p.image.at(0, c, sy, sx);
      out.mask.at(0, y, x) = p.mask.at(0, sy, sx);
    }
  return out;
}

// Chessboard distance from each pixel to the nearest support pixel (BFS).
inline std::vector<std::size_t> distance_to_support(const Patch& p) {
  const std::size_t h = p.mask.h, w = p.mask.w;
  std::vector<std::size_t> dist(h * w, SIZE_MAX);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < h * w; ++i)
    if (p.mask.data[i] == p.cls) {
      dist[i] = 0;
      queue.push_back(i);
    }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const auto y = static_cast<long>(i / w), x = static_cast<long>(i % w);
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (dist[j] == SIZE_MAX) {
          dist[j] = dist[i] + 1;
          queue.push_back(j);
        }
      }
  }
  return dist;
}

}  // namespace detail

/// Crops every 4-connected defect component (at least `min_pixels`, at most a
/// quarter of the image) with a `margin`-pixel border. At most
/// `max_per_class` crops are kept per class, chosen at random.
inline PatchBank build_patch_bank(const std::vector<Sample>& samples, std::size_t num_classes,
                                  std::size_t max_per_class, Rng& rng, std::size_t margin = 3,
                                  std::size_t min_pixels = 4) {
  std::vector<PatchBank> per_class(num_classes);
  for (const Sample& s : samples) {
    const std::size_t h = s.mask.h, w = s.mask.w;
    std::vector<bool> seen(h * w, false);
    for (std::size_t start = 0; start < h * w; ++start) {
      const std::int32_t cls = s.mask.data[start];
      if (cls <= 0 || seen[start]) continue;
      if (static_cast<std::size_t>(cls) >= num_classes) throw DataError("mask class outside the configured range");
      std::vector<std::size_t> comp{start};
      seen[start] = true;
      for (std::size_t k = 0; k < comp.size(); ++k) {
        const std::size_t y = comp[k] / w, x = comp[k] % w;
        const std::size_t nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& q : nbr) {
          if (q[0] >= h || q[1] >= w) continue;  // wraps below zero too
          const std::size_t j = q[0] * w + q[1];
          if (!seen[j] && s.mask.data[j] == cls) {
            seen[j] = true;
            comp.push_back(j);
          }
        }
      }
      if (comp.size() < min_pixels || comp.size() * 4 > h * w) continue;
      std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
      for (std::size_t i : comp) {
        y0 = std::min(y0, i / w);
        y1 = std::max(y1, i / w);
        x0 = std::min(x0, i % w);
        x1 = std::max(x1, i % w);
      }
      y0 = y0 >= margin ? y0 - margin : 0;
      x0 = x0 >= margin ? x0 - margin : 0;
      y1 = std::min(h - 1, y1 + margin);
      x1 = std::min(w - 1, x1 + margin);
      Patch p{Tensor<float>({1, 3, y1 - y0 + 1, x1 - x0 + 1}), LabelMap(1, y1 - y0 + 1, x1 - x0 + 1), cls};
      for (std::size_t y = y0; y <= y1; ++y)
        for (std::size_t x = x0; x <= x1; ++x)
          for (std::size_t c = 0; c < 3; ++c) p.image.at(0, c, y - y0, x - x0) = s.image.at(0, c, y, x);
      for (std::size_t i : comp) p.mask.at(0, i / w - y0, i % w - x0) = cls;
      per_class[static_cast<std::size_t>(cls)].push_back(std::move(p));
    }
  }
  PatchBank bank;
  for (auto& list : per_class) {
    for (std::size_t i = list.size(); i > 1; --i) std::swap(list[i - 1], list[rng.below(i)]);
    for (std::size_t i = 0; i < std::min(max_per_class, list.size()); ++i) bank.push_back(std::move(list[i]));
  }
  return bank;
}

/// Pastes up to opt.max_patches patches, each time of the bank class with the
/// fewest pixels in the sample so far. A paste lands only where every pixel of
/// the (transformed) crop is background, so existing defects are never touched.
inline DliResult dli_inject(const Sample& sample, const PatchBank& bank, std::size_t num_classes, Rng& rng,
                            const DliOptions& opt = {}) {
  DliResult res{sample, 0, false};
  if (bank.empty() || opt.max_patches == 0) return res;
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (auto v : sample.mask.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) throw DataError("mask class outside the configured range");
    ++counts[static_cast<std::size_t>(v)];
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto c = static_cast<std::size_t>(bank[i].cls);
    if (c == 0 || c >= num_classes) throw ConfigError("patch bank holds a class outside [1, K)");
    by_class[c].push_back(i);
  }
  std::vector<bool> blocked(num_classes, false);
  Sample& out = res.sample;
  const std::size_t H = out.mask.h, W = out.mask.w;

  for (std::size_t round = 0; round < opt.max_patches; ++round) {
    std::size_t cls = 0;
    for (std::size_t c = 1; c < num_classes; ++c) {
      if (by_class[c].empty() || blocked[c]) continue;
      if (cls == 0 || counts[c] < counts[cls]) cls = c;
    }
    if (cls == 0) break;

    Patch p = bank[by_class[cls][rng.below(by_class[cls].size())]];
    if (opt.flip && rng.bernoulli(0.5)) p = detail::flip_patch(p);
    if (opt.rotate) {
      for (std::uint64_t r = rng.below(4); r > 0; --r) p = detail::rot90_patch(p);
    }
    if (opt.scale) {
      static constexpr double factors[3] = {0.75, 1.0, 1.5};
      const double f = factors[rng.below(3)];
      if (f != 1.0) {
        Patch scaled = detail::scale_patch(p, f);
        if (scaled.support() > 0) p = std::move(scaled);
      }
    }
    const std::size_t ph = p.mask.h, pw = p.mask.w;
    bool placed = false;
    if (ph <= H && pw <= W) {
      for (std::size_t a = 0; a < opt.attempts && !placed; ++a) {
        const std::size_t oy = rng.below(H - ph + 1), ox = rng.below(W - pw + 1);
        bool clear = true;
        for (std::size_t y = 0; y < ph && clear; ++y)
          for (std::size_t x = 0; x < pw && clear; ++x) clear = out.mask.at(0, oy + y, ox + x) == 0;
        if (!clear) continue;
        const auto dist = detail::distance_to_support(p);
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) {
            const std::size_t d = dist[y * pw + x];
            if (d > opt.feather) continue;
            const float alpha = 1.0f - static_cast<float>(d) / static_cast<float>(opt.feather + 1);
            for (std::size_t c = 0; c < 3; ++c) {
              float& dst = out.image.at(0, c, oy + y, ox + x);
              dst = alpha * p.image.at(0, c, y, x) + (1.0f - alpha) * dst;
            }
            if (d == 0) {
              out.mask.at(0, oy + y, ox + x) = p.cls;
              ++counts[cls];
              --counts[0];
            }
          }
        placed = true;
      }
    }
    if (placed) {
      ++res.injected;
    } else {
      blocked[cls] = true;
      res.no_room = true;
    }
  }
  return res;
}

}  // namespace fortress
