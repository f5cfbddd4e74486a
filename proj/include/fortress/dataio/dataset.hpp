#pragma once

// Dataset directories (images/<id>.ppm, masks/<id>.pgm, manifest.json) and
// seed-deterministic batching.

#include <array>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/dataio/pnm.hpp"
#include "fortress/rng.hpp"

namespace fortress {

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<Sample> samples;
};

/// Reads the samples whose manifest split equals `split` ("all" takes every sample).
inline Dataset load_dataset(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.num_classes = manifest.at("num_classes").get<std::size_t>();
    for (const auto& entry : manifest.at("samples")) {
      const auto sp = entry.at("split").get<std::string>();
      if (split != "all" && sp != split) continue;
      const auto id = entry.at("id").get<std::string>();
      Sample s;
      s.id = id;
      s.image = read_image((fs::path(dir) / "images" / (id + ".ppm")).string());
      s.mask = read_mask((fs::path(dir) / "masks" / (id + ".pgm")).string());
      if (s.image.shape().h != s.mask.h || s.image.shape().w != s.mask.w) {
        throw DataError("sample " + id + ": image and mask sizes differ");
      }
      for (auto v : s.mask.data) {
        if (static_cast<std::size_t>(v) >= ds.num_classes) {
          throw DataError("sample " + id + ": mask value " + std::to_string(v) + " >= num_classes");
        }
      }
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  return ds;
}

struct Batch {
  Tensor<float> images;  // (B, 3, H, W)
  LabelMap masks;        // (B, H, W)
  std::vector<std::string> ids;
};

/// Nearest resize of one (1, H, W) mask, sampling source index floor((o + 0.5) * in / out).
inline LabelMap resize_mask_nearest(const LabelMap& m, std::size_t h, std::size_t w) {
  LabelMap out(1, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = std::min(m.h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * m.h / h));
      const std::size_t sx = std::min(m.w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * m.w / w));
      out.at(0, y, x) = m.at(0, sy, sx);
    }
  return out;
}

/// (x - mean) / std per channel with the ImageNet statistics.
inline void normalize_imagenet(Tensor<float>& images) {
  const Shape s = images.shape();
  if (s.c != 3) throw ConfigError("normalization expects 3 channels, got " + s.str());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (float& v : images.plane(n, c)) v = (v - kImageNetMean[c]) / kImageNetStd[c];
}

/// Stacks samples `idx` into one batch, resizing to `resize_to` (0 keeps the size).
inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, std::size_t resize_to,
                        bool normalize) {
  if (idx.empty()) throw ConfigError("empty batch");
  const Sample& first = samples.at(idx[0]);
  const std::size_t h = resize_to ? resize_to : first.mask.h;
  const std::size_t w = resize_to ? resize_to : first.mask.w;
  Batch b{Tensor<float>({idx.size(), 3, h, w}), LabelMap(idx.size(), h, w), {}};
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Sample& s = samples.at(idx[k]);
    const bool same = s.mask.h == h && s.mask.w == w;
    const Tensor<float> img = same ? s.image : ops::resize_bilinear_values(s.image, h, w);
    const LabelMap mask = same ? s.mask : resize_mask_nearest(s.mask, h, w);
    std::copy(img.data(), img.data() + img.numel(), b.images.data() + k * 3 * h * w);
    std::copy(mask.data.begin(), mask.data.end(), b.masks.data.begin() + static_cast<long>(k * h * w));
    b.ids.push_back(s.id);
  }
  if (normalize) normalize_imagenet(b.images);
  return b;
}

/// Sample order for one epoch: a Fisher-Yates shuffle seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle = true) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (!shuffle) return order;
  Rng rng = Rng(seed).fork(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Index groups of size `batch` (the last one may be short) in epoch order.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                           std::size_t epoch, bool shuffle = true) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  const auto order = epoch_order(n, seed, epoch, shuffle);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(std::min(n, i + batch)));
  }
  return out;
}

inline std::vector<Batch> load_batches(const std::vector<Sample>& samples, std::size_t batch, std::uint64_t seed,
                                       std::size_t epoch, std::size_t resize_to, bool normalize, bool shuffle = true) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(samples.size(), batch, seed, epoch, shuffle)) {
    out.push_back(make_batch(samples, idx, resize_to, normalize));
  }
  return out;
}

}  // namespace fortress
