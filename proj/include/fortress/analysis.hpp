#pragma once

// Parameter and FLOP accounting derived from the model topology, a standard
// convolution "twin" for comparison, and a forward-latency benchmark.
//
// FLOP conventions:
//   conv            2 * H_out * W_out * k^2 * (C_in / groups) * C_out, plus one add per output for a bias
//   BN, activations 2 per element (ReLU, sigmoid, SiLU alike)
//   add, mul        1 per output element
//   pooling         1 per input element
//   bilinear 2x up  8 per output element (four weighted taps)
//   min-max scaling 4 per element
//   spline map      6 * O(O+3)/2 per element for Cox-de Boor plus 2(O+1) for the control-point sum

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <omp.h>

#include "json.hpp"

#include "fortress/model.hpp"

namespace fortress {

/// k^2 * C_out / (k^2 + C_out): standard-conv parameters over DS-conv parameters.
inline double reduction_factor(std::size_t k, std::size_t c_out) {
  if (k < 1 || c_out < 1) throw ConfigError("reduction_factor needs k >= 1 and c_out >= 1");
  const double k2 = static_cast<double>(k * k);
  const auto c = static_cast<double>(c_out);
  return k2 * c / (k2 + c);
}

struct LayerRow {
  std::string name;
  std::string kind;   // ds_conv, conv, bn, act, eltwise, pool, resize, attention, tikan, head
  std::string level;  // enc1.., dec1.., head
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t twin_params = 0;
  std::uint64_t twin_flops = 0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
};

struct AnalysisReport {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<LayerRow> rows;

  std::uint64_t total_params() const { return sum(&LayerRow::params); }
  std::uint64_t total_flops() const { return sum(&LayerRow::flops); }
  std::uint64_t twin_params() const { return sum(&LayerRow::twin_params); }
  std::uint64_t twin_flops() const { return sum(&LayerRow::twin_flops); }
  /// Whole-model parameter ratio twin / actual.
  double twin_ratio() const { return static_cast<double>(twin_params()) / static_cast<double>(total_params()); }
  /// Same ratio restricted to the DS convolution rows.
  double conv_twin_ratio() const {
    std::uint64_t a = 0, t = 0;
    for (const auto& r : rows)
      if (r.kind == "ds_conv") {
        a += r.params;
        t += r.twin_params;
      }
    return a == 0 ? 1.0 : static_cast<double>(t) / static_cast<double>(a);
  }
  std::map<std::string, std::uint64_t> flops_by_level() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& r : rows) out[r.level] += r.flops;
    return out;
  }

 private:
  std::uint64_t sum(std::uint64_t LayerRow::*field) const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.*field;
    return s;
  }
};

namespace detail {

inline std::uint64_t conv_flops(std::size_t h, std::size_t w, std::size_t k, std::size_t c_in, std::size_t c_out,
                                std::size_t groups, bool bias) {
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  return 2 * hw * k * k * (c_in / groups) * c_out + (bias ? hw * c_out : 0);
}

inline std::uint64_t spline_flops_per_element(std::size_t order) {
  return 6 * order * (order + 3) / 2 + 2 * (order + 1);
}

class ReportBuilder {
 public:
  ReportBuilder(const ModelConfig& cfg, std::size_t h, std::size_t w) : cfg_(cfg) {
    report_.height = h;
    report_.width = w;
  }

  AnalysisReport build() {
    const std::size_t J = cfg_.levels;
    const std::size_t H = report_.height, W = report_.width;
    for (std::size_t j = 1; j <= J; ++j) {
      level_ = "enc" + std::to_string(j);
      const std::size_t h = H >> (j - 1), w = W >> (j - 1);
      const std::size_t c_in = j == 1 ? cfg_.in_channels : cfg_.width(j - 1);
      if (j > 1) same("encoder." + std::to_string(j) + ".pool", "pool", 0, 4ull * h * w * c_in);
      block("encoder." + std::to_string(j), c_in, cfg_.width(j), h, w, cfg_.encoder_has_tikan(j));
    }
    for (std::size_t d = J - 1; d >= 1; --d) {
      level_ = "dec" + std::to_string(d);
      const std::string p = "decoder." + std::to_string(d);
      const std::size_t h = H >> (d - 1), w = W >> (d - 1);
      const std::size_t c = cfg_.width(d), c_up = cfg_.width(d + 1);
      const std::size_t k = cfg_.kernel_at(d);
      const bool tikan = cfg_.decoder_has_tikan(d);

      channel_attention(p + ".attention.channel(skip)", c, h, w, true);
      spatial_attention(p + ".attention.spatial(skip)", c, k, h, w, true);
      const std::uint64_t up = cfg_.upsample == "nearest" ? 0 : 8ull * h * w * c_up;
      same(p + ".upsample", "resize", 0, up);
      block(p + ".block", c + c_up, c, h, w, tikan);

      const bool kan_on = tikan && gate(c, h, w, cfg_.tikan);
      if (kan_on) tikan_rows(p + ".block.tikan(fusion)", c, h, w, false);
      spatial_attention(p + ".attention.spatial(fusion)", c, k, h, w, false);
      channel_attention(p + ".attention.channel(fusion)", c, h, w, false);
      same(p + ".fusion", "conv", 3ull * c * c, conv_flops(h, w, 1, 3 * c, c, 1, false), 3 * c, c);

      if (d == 1) head("head.final", c, h, w);
      else if (d - 2 < cfg_.aux_heads()) head("head.aux" + std::to_string(d), c, h, w);
      if (d == 1) break;
    }
    return std::move(report_);
  }

 private:
  void same(const std::string& name, const std::string& kind, std::uint64_t params, std::uint64_t flops,
            std::size_t c_in = 0, std::size_t c_out = 0) {
    report_.rows.push_back({name, kind, level_, params, flops, params, flops, c_in, c_out});
  }

  void ds_unit(const std::string& p, std::size_t c_in, std::size_t c_out, std::size_t h, std::size_t w) {
    const std::uint64_t el = static_cast<std::uint64_t>(h) * w * c_out;
    LayerRow conv{p + ".conv", "ds_conv", level_, 9ull * c_in + static_cast<std::uint64_t>(c_in) * c_out,
                  conv_flops(h, w, 3, c_in, c_in, c_in, false) + conv_flops(h, w, 1, c_in, c_out, 1, false),
                  9ull * c_in * c_out, conv_flops(h, w, 3, c_in, c_out, 1, false), c_in, c_out};
    report_.rows.push_back(conv);
    same(p + ".bn", "bn", 2ull * c_out, 2 * el, c_out, c_out);
    same(p + ".relu", "act", 0, 2 * el, c_out, c_out);
  }

  void tikan_rows(const std::string& p, std::size_t d, std::size_t h, std::size_t w, bool owns_params) {
    const std::size_t r = tikan_rank(d, cfg_.tikan.rank_cap);
    const std::uint64_t el = static_cast<std::uint64_t>(h) * w * d;
    const std::size_t basis = cfg_.tikan.grid + cfg_.tikan.order;
    const std::uint64_t params = 4ull * d * r + static_cast<std::uint64_t>(d) * basis + 9ull * d + 2 + d + 1;
    std::uint64_t flops = 2 * el;                                                         // silu
    flops += conv_flops(h, w, 1, d, r, 1, false) + conv_flops(h, w, 1, r, d, 1, false);  // base B, A
    flops += conv_flops(h, w, 3, d, d, d, false);                                        // enhance
    flops += 4 * el + spline_flops_per_element(cfg_.tikan.order) * el;                   // minmax, spline
    flops += conv_flops(h, w, 1, d, r, 1, false) + conv_flops(h, w, 1, r, d, 1, false);  // spline B, A
    flops += 4 * el;                                                                     // scales, sum, combine
    flops += 2 * el;                                                                     // alpha * tau + x
    same(p, "tikan", owns_params ? params : 0, flops, d, d);
  }

  void block(const std::string& p, std::size_t c_in, std::size_t c_out, std::size_t h, std::size_t w, bool tikan) {
    const std::uint64_t el = static_cast<std::uint64_t>(h) * w * c_out;
    ds_unit(p + ".ds1", c_in, c_out, h, w);
    ds_unit(p + ".ds2", c_out, c_out, h, w);
    same(p + ".micro_residual", "eltwise", 0, el, c_out, c_out);
    if (tikan) {
      if (gate(c_out, h, w, cfg_.tikan)) {
        tikan_rows(p + ".tikan", c_out, h, w, true);
      } else {
        const std::size_t r = tikan_rank(c_out, cfg_.tikan.rank_cap);
        const std::size_t basis = cfg_.tikan.grid + cfg_.tikan.order;
        same(p + ".tikan(gated off)", "tikan", 4ull * c_out * r + c_out * basis + 9ull * c_out + 2 + c_out + 1, 0);
      }
    }
    if (c_in != c_out) same(p + ".proj", "conv", static_cast<std::uint64_t>(c_in) * c_out, conv_flops(h, w, 1, c_in, c_out, 1, false), c_in, c_out);
    same(p + ".residual", "eltwise", 0, el, c_out, c_out);
  }

  void channel_attention(const std::string& p, std::size_t c, std::size_t h, std::size_t w, bool owns_params) {
    const std::size_t r = channel_bottleneck(c);
    const std::uint64_t el = static_cast<std::uint64_t>(h) * w * c;
    const std::uint64_t mlp = conv_flops(1, 1, 1, c, r, 1, true) + 2 * r + conv_flops(1, 1, 1, r, c, 1, true);
    const std::uint64_t flops = 2 * el + 2 * mlp + c + 2 * c + el;  // pools, two MLPs, add, sigmoid, scale
    same(p, "attention", owns_params ? 2ull * c * r + r + c : 0, flops, c, c);
  }

  void spatial_attention(const std::string& p, std::size_t c, std::size_t k, std::size_t h, std::size_t w,
                         bool owns_params) {
    const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
    const std::uint64_t flops = 2 * hw * c + conv_flops(h, w, k, 2, 2, 2, false) + conv_flops(h, w, 1, 2, 1, 1, false) +
                                2 * hw + hw * c;  // pools, DS conv, sigmoid, scale
    same(p, "attention", owns_params ? 2ull * k * k + 2 : 0, flops, c, c);
  }

  void head(const std::string& p, std::size_t c, std::size_t h, std::size_t w) {
    const std::size_t K = cfg_.num_classes;
    same(p, "head", c + static_cast<std::uint64_t>(c) * K + K,
         conv_flops(h, w, 1, c, c, c, false) + conv_flops(h, w, 1, c, K, 1, true), c, K);
  }

  ModelConfig cfg_;
  AnalysisReport report_;
  std::string level_;
};

}  // namespace detail

/// Per-layer parameters and FLOPs of `cfg` at an H x W input, in forward order.
inline AnalysisReport analyze_config(const ModelConfig& cfg, std::size_t h, std::size_t w) {
  cfg.validate();
  if (h == 0 || w == 0 || h % cfg.divisor() != 0 || w % cfg.divisor() != 0) {
    throw ConfigError("analysis input must be a positive multiple of " + std::to_string(cfg.divisor()));
  }
  return detail::ReportBuilder(cfg, h, w).build();
}

inline AnalysisReport analyze_config(const ModelConfig& cfg) { return analyze_config(cfg, cfg.input_size, cfg.input_size); }

inline nlohmann::json report_json(const AnalysisReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"name", row.name},
                    {"kind", row.kind},
                    {"level", row.level},
                    {"params", row.params},
                    {"flops", row.flops},
                    {"twin_params", row.twin_params},
                    {"twin_flops", row.twin_flops},
                    {"c_in", row.c_in},
                    {"c_out", row.c_out}});
  }
  return {{"input", {r.height, r.width}},
          {"rows", rows},
          {"total_params", r.total_params()},
          {"total_flops", r.total_flops()},
          {"gflops", static_cast<double>(r.total_flops()) * 1e-9},
          {"twin_params", r.twin_params()},
          {"twin_flops", r.twin_flops()},
          {"twin_ratio", r.twin_ratio()},
          {"conv_twin_ratio", r.conv_twin_ratio()},
          {"flops_by_level", r.flops_by_level()}};
}

inline std::string report_text(const AnalysisReport& r) {
  std::size_t name_w = 4;
  for (const auto& row : r.rows) name_w = std::max(name_w, row.name.size());
  std::ostringstream os;
  os << "input " << r.height << "x" << r.width << "\n";
  os << std::left << std::setw(static_cast<int>(name_w)) << "name" << "  " << std::setw(9) << "kind" << std::right
     << std::setw(12) << "params" << std::setw(16) << "flops" << std::setw(12) << "twin_params" << "\n";
  for (const auto& row : r.rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << row.name << "  " << std::setw(9) << row.kind
       << std::right << std::setw(12) << row.params << std::setw(16) << row.flops << std::setw(12) << row.twin_params
       << "\n";
  }
  os << "\nflops by level\n";
  for (const auto& [level, f] : r.flops_by_level()) os << "  " << std::left << std::setw(6) << level << std::right << std::setw(16) << f << "\n";
  os << std::fixed << std::setprecision(4);
  os << "\ntotal params     " << r.total_params() << " (" << static_cast<double>(r.total_params()) * 1e-6 << " M)\n";
  os << "total FLOPs      " << r.total_flops() << " (" << static_cast<double>(r.total_flops()) * 1e-9 << " G)\n";
  os << "twin params      " << r.twin_params() << "\n";
  os << "twin FLOPs       " << r.twin_flops() << "\n";
  os << "twin ratio       " << r.twin_ratio() << "\n";
  os << "conv twin ratio  " << r.conv_twin_ratio() << "\n";
  return os.str();
}

struct LatencyStats {
  std::size_t iterations = 0;
  double mean_ms = 0;
  double median_ms = 0;
  double min_ms = 0;
};

/// Eval-mode forward latency on a (1, C, size, size) input after 3 untimed
/// runs, with OpenMP limited to one thread.
template <Scalar T>
LatencyStats bench_forward(FortressModel<T>& model, std::size_t size, std::size_t iterations) {
  if (iterations == 0) throw ConfigError("bench_forward needs at least one iteration");
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  Rng rng(0);
  Tensor<T> x({1, model.config().in_channels, size, size});
  for (T& v : x.span()) v = static_cast<T>(rng.normal());
  auto once = [&] {
    Tape<T> tape(false);
    const auto t0 = std::chrono::steady_clock::now();
    auto out = model.forward(tape, tape.constant(x), false);
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  std::vector<double> times;
  try {
    for (int i = 0; i < 3; ++i) once();
    for (std::size_t i = 0; i < iterations; ++i) times.push_back(once());
  } catch (...) {
    omp_set_num_threads(threads);
    throw;
  }
  omp_set_num_threads(threads);
  LatencyStats s;
  s.iterations = iterations;
  for (double t : times) s.mean_ms += t;
  s.mean_ms /= static_cast<double>(times.size());
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  s.median_ms = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  s.min_ms = times.front();
  s.mean_ms = std::max(s.mean_ms, s.min_ms);  // summation rounding
  return s;
}

}  // namespace fortress
