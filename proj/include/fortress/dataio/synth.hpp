#pragma once

// Synthetic surface-defect images: value-noise texture with cracks (thin
// polylines), holes (filled ellipses) and erosion (irregular blobs).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/dataio/pnm.hpp"
#include "fortress/rng.hpp"

namespace fortress {

inline constexpr double kMaxDefectDensity = 0.30;

struct SynthConfig {
  std::size_t n_samples = 0;
  std::size_t size = 64;
  std::size_t num_classes = 4;  // background, crack, hole, erosion
  std::uint64_t seed = 0;
  double density_min = 0.05;
  double density_max = 0.25;
  double val_fraction = 0.2;
  double test_fraction = 0.0;

  void validate() const {
    if (size == 0 || size % 16 != 0) throw ConfigError("synth size must be a positive multiple of 16, got " + std::to_string(size));
    if (num_classes < 2 || num_classes > 4) {
      throw ConfigError("synth generates 2 to 4 classes, got " + std::to_string(num_classes));
    }
    if (!(density_min >= 0.0 && density_min <= density_max && density_max <= kMaxDefectDensity)) {
      throw ConfigError("synth densities need 0 <= density_min <= density_max <= 0.3");
    }
    if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0)) {
      throw ConfigError("split fractions must be non-negative and sum to at most 1");
    }
  }

  std::size_t n_val() const { return static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_samples))); }
  std::size_t n_test() const {
    return std::min(n_samples - n_val(),
                    static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n_samples))));
  }
  /// Samples are assigned in index order: train, then val, then test.
  std::string split_of(std::size_t i) const {
    const std::size_t n_train = n_samples - n_val() - n_test();
    if (i < n_train) return "train";
    return i < n_train + n_val() ? "val" : "test";
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_samples", c.n_samples},       {"size", c.size},
                     {"num_classes", c.num_classes},   {"seed", c.seed},
                     {"density_min", c.density_min},   {"density_max", c.density_max},
                     {"val_fraction", c.val_fraction}, {"test_fraction", c.test_fraction}};
}

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"background", "crack", "hole", "erosion"};
  return names;
}

namespace detail {

class Canvas {
 public:
  Canvas(std::size_t size, Rng& rng) : n_(size), mask_(1, size, size), img_({1, 3, size, size}), rng_(rng) {}

  std::size_t size() const { return n_; }
  LabelMap& mask() { return mask_; }
  Tensor<float>& image() { return img_; }

  /// Paints the pixels listed in `pts` that are still background; returns how many that was.
  std::size_t paint(const std::vector<std::pair<int, int>>& pts, std::int32_t cls, const std::array<float, 3>& rgb,
                    std::size_t budget) {
    std::vector<std::size_t> fresh;
    for (auto [y, x] : pts) {
      if (y < 0 || x < 0 || y >= static_cast<int>(n_) || x >= static_cast<int>(n_)) continue;
      const std::size_t i = static_cast<std::size_t>(y) * n_ + static_cast<std::size_t>(x);
      if (mask_.data[i] == 0) fresh.push_back(i);
    }
    std::sort(fresh.begin(), fresh.end());
    fresh.erase(std::unique(fresh.begin(), fresh.end()), fresh.end());
    if (fresh.empty() || fresh.size() > budget) return 0;
    for (std::size_t i : fresh) {
      mask_.data[i] = cls;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = rgb[c] + rng_.uniform(-0.04, 0.04);
        img_[c * n_ * n_ + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    return fresh.size();
  }

 private:
  std::size_t n_;
  LabelMap mask_;
  Tensor<float> img_;
  Rng& rng_;
};

// Two octaves of smoothstep-interpolated lattice noise in [0, 1).
inline std::vector<double> value_noise(std::size_t n, Rng& rng) {
  std::vector<double> out(n * n, 0.0);
  double amp_total = 0.0;
  for (auto [cell, amp] : {std::pair<std::size_t, double>{16, 0.65}, {4, 0.35}}) {
    const std::size_t g = n / cell + 2;
    std::vector<double> lattice(g * g);
    for (double& v : lattice) v = rng.uniform();
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double fy = static_cast<double>(y) / static_cast<double>(cell);
        const double fx = static_cast<double>(x) / static_cast<double>(cell);
        const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
        auto smooth = [](double t) { return t * t * (3 - 2 * t); };
        const double ty = smooth(fy - static_cast<double>(y0)), tx = smooth(fx - static_cast<double>(x0));
        const double a = lattice[y0 * g + x0], b = lattice[y0 * g + x0 + 1];
        const double c = lattice[(y0 + 1) * g + x0], d = lattice[(y0 + 1) * g + x0 + 1];
        out[y * n + x] += amp * ((1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d));
      }
    amp_total += amp;
  }
  for (double& v : out) v /= amp_total;
  return out;
}

inline std::vector<std::pair<int, int>> crack_pixels(std::size_t n, Rng& rng) {
  std::vector<std::pair<int, int>> pts;
  double y = rng.uniform(0, static_cast<double>(n)), x = rng.uniform(0, static_cast<double>(n));
  double heading = rng.uniform(0, 2 * std::numbers::pi);
  const int segments = 3 + static_cast<int>(rng.below(4));
  const bool thick = rng.bernoulli(0.5);
  for (int s = 0; s < segments; ++s) {
    heading += rng.uniform(-0.7, 0.7);
    const double len = rng.uniform(6.0, 14.0);
    const int steps = static_cast<int>(len * 2);
    for (int k = 0; k <= steps; ++k) {
      const double py = y + std::sin(heading) * len * k / steps;
      const double px = x + std::cos(heading) * len * k / steps;
      const int iy = static_cast<int>(std::floor(py)), ix = static_cast<int>(std::floor(px));
      pts.emplace_back(iy, ix);
      if (thick) {
        pts.emplace_back(iy + 1, ix);
        pts.emplace_back(iy, ix + 1);
      }
    }
    y += std::sin(heading) * len;
    x += std::cos(heading) * len;
  }
  return pts;
}

inline std::vector<std::pair<int, int>> ellipse_pixels(std::size_t n, Rng& rng) {
  std::vector<std::pair<int, int>> pts;
  const double cy = rng.uniform(0, static_cast<double>(n)), cx = rng.uniform(0, static_cast<double>(n));
  const double ry = rng.uniform(2.5, 8.0), rx = rng.uniform(2.5, 8.0);
  const double th = rng.uniform(0, std::numbers::pi);
  const double c = std::cos(th), s = std::sin(th);
  const int r = static_cast<int>(std::ceil(std::max(rx, ry)));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double u = c * dx + s * dy, v = -s * dx + c * dy;
      if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) {
        pts.emplace_back(static_cast<int>(std::floor(cy)) + dy, static_cast<int>(std::floor(cx)) + dx);
      }
    }
  return pts;
}

inline std::vector<std::pair<int, int>> blob_pixels(std::size_t n, Rng& rng) {
  std::vector<std::pair<int, int>> pts;
  const double cy = rng.uniform(0, static_cast<double>(n)), cx = rng.uniform(0, static_cast<double>(n));
  const int lobes = 3 + static_cast<int>(rng.below(4));
  for (int l = 0; l < lobes; ++l) {
    const double oy = cy + rng.uniform(-5.0, 5.0), ox = cx + rng.uniform(-5.0, 5.0);
    const double rad = rng.uniform(2.0, 5.5);
    const int r = static_cast<int>(std::ceil(rad));
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dy * dy + dx * dx <= rad * rad) {
          pts.emplace_back(static_cast<int>(std::floor(oy)) + dy, static_cast<int>(std::floor(ox)) + dx);
        }
  }
  return pts;
}

}  // namespace detail

/// Sample `index` of the dataset described by `cfg`; a pure function of both.
inline Sample synth_sample(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(index);
  const std::size_t n = cfg.size;
  detail::Canvas canvas(n, rng);

  const double base = rng.uniform(0.45, 0.65);
  std::array<double, 3> tint{};
  for (double& t : tint) t = rng.uniform(-0.04, 0.04);
  const auto noise = detail::value_noise(n, rng);
  for (std::size_t i = 0; i < n * n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = base + tint[c] + 0.25 * (noise[i] - 0.5);
      canvas.image()[c * n * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

  static constexpr std::array<std::array<float, 3>, 4> colors{{
      {0.0f, 0.0f, 0.0f},
      {0.08f, 0.08f, 0.08f},  // crack
      {0.15f, 0.05f, 0.30f},  // hole
      {0.85f, 0.55f, 0.25f},  // erosion
  }};
  const auto total = static_cast<double>(n * n);
  const auto cap = static_cast<std::size_t>(std::floor(kMaxDefectDensity * total));
  const auto target = static_cast<std::size_t>(rng.uniform(cfg.density_min, cfg.density_max) * total);
  std::size_t painted = 0;
  for (int attempt = 0; attempt < 60 && painted < target; ++attempt) {
    const auto cls = static_cast<std::int32_t>(1 + rng.below(cfg.num_classes - 1));
    std::vector<std::pair<int, int>> pts;
    if (cls == 1) pts = detail::crack_pixels(n, rng);
    else if (cls == 2) pts = detail::ellipse_pixels(n, rng);
    else pts = detail::blob_pixels(n, rng);
    painted += canvas.paint(pts, cls, colors[static_cast<std::size_t>(cls)], cap - painted);
  }

  Sample s;
  s.image = std::move(canvas.image());
  s.mask = std::move(canvas.mask());
  char id[32];
  std::snprintf(id, sizeof id, "s%05zu", index);
  s.id = id;
  return s;
}

inline std::vector<std::uint64_t> class_counts(const LabelMap& mask, std::size_t k) {
  std::vector<std::uint64_t> counts(k, 0);
  for (auto v : mask.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= k) {
      throw DataError("mask value " + std::to_string(v) + " outside [0, " + std::to_string(k) + ")");
    }
    ++counts[static_cast<std::size_t>(v)];
  }
  return counts;
}

/// Writes images/<id>.ppm, masks/<id>.pgm and manifest.json; returns the manifest.
inline nlohmann::json synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  try {
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");
  } catch (const fs::filesystem_error& e) {
    throw std::ios_base::failure(std::string("cannot create dataset directory: ") + e.what());
  }
  nlohmann::json samples = nlohmann::json::array();
  std::vector<std::uint64_t> totals(cfg.num_classes, 0);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const Sample s = synth_sample(cfg, i);
    write_image((fs::path(out_dir) / "images" / (s.id + ".ppm")).string(), s.image);
    write_mask((fs::path(out_dir) / "masks" / (s.id + ".pgm")).string(), s.mask);
    const auto counts = class_counts(s.mask, cfg.num_classes);
    for (std::size_t k = 0; k < counts.size(); ++k) totals[k] += counts[k];
    samples.push_back({{"id", s.id}, {"split", cfg.split_of(i)}, {"counts", counts}});
  }
  nlohmann::json names(std::vector<std::string>(synth_class_names().begin(),
                                                synth_class_names().begin() + static_cast<long>(cfg.num_classes)));
  nlohmann::json manifest = {{"num_classes", cfg.num_classes}, {"size", cfg.size},      {"class_names", names},
                             {"samples", samples},             {"class_counts", totals}, {"generator", cfg}};
  detail::write_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace fortress
