#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/blocks.hpp"

namespace fortress {

struct ModelConfig {
  std::size_t levels = 5;
  std::vector<std::size_t> widths{32, 64, 128, 256, 512};
  std::size_t in_channels = 3;
  std::size_t num_classes = 9;
  std::vector<std::size_t> kernels{7, 5, 3, 3};  // decoder attention kernels, coarsest to finest
  std::vector<double> aux_weights{0.4, 0.3, 0.2};  // beta for decoder levels 2, 3, 4
  TiKANConfig tikan;
  bool head_fusion = false;
  std::string upsample = "bilinear";
  std::size_t input_size = 256;  // resolution used to place TiKAN modules

  void validate() const {
    if (levels < 2) throw ConfigError("model needs at least 2 levels");
    if (widths.size() != levels) {
      throw ConfigError("widths has " + std::to_string(widths.size()) + " entries for " + std::to_string(levels) +
                        " levels");
    }
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) throw ConfigError("widths must be positive");
      if (i > 0 && widths[i] <= widths[i - 1]) throw ConfigError("widths must be strictly increasing");
    }
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (kernels.size() < levels - 1) {
      throw ConfigError("kernel schedule needs at least " + std::to_string(levels - 1) + " entries");
    }
    for (std::size_t k : kernels) check_attention_kernel(k);
    if (aux_weights.size() < aux_heads()) {
      throw ConfigError("aux_weights needs " + std::to_string(aux_heads()) + " entries");
    }
    if (upsample != "bilinear" && upsample != "nearest") throw ConfigError("upsample must be bilinear or nearest");
    if (input_size % divisor() != 0) throw ConfigError("input_size must be a multiple of " + std::to_string(divisor()));
    tikan.validate();
  }

  /// Spatial sizes must be multiples of this.
  std::size_t divisor() const { return std::size_t{1} << (levels - 1); }

  /// Auxiliary heads sit on decoder levels 2 .. min(4, J-1).
  std::size_t aux_heads() const { return levels >= 3 ? std::min<std::size_t>(4, levels - 1) - 1 : 0; }

  /// Attention kernel for decoder level d in [1, J-1]: the finest J-1 schedule entries.
  std::size_t kernel_at(std::size_t d) const {
    const std::size_t offset = kernels.size() - (levels - 1);
    return kernels[offset + (levels - 1 - d)];
  }

  /// Width of encoder level j in [1, J].
  std::size_t width(std::size_t j) const { return widths[j - 1]; }

  /// Side length of level j at the configured input size.
  std::size_t side_at(std::size_t j, std::size_t input) const { return input >> (j - 1); }

  bool encoder_has_tikan(std::size_t j) const {
    const std::size_t s = side_at(j, input_size);
    return gate(width(j), s, s, tikan);
  }
  bool decoder_has_tikan(std::size_t d) const {
    const std::size_t s = side_at(d, input_size);
    return gate(width(d), s, s, tikan);
  }
};

inline void to_json(nlohmann::json& j, const TiKANConfig& c) {
  j = nlohmann::json{{"gamma_c", c.gamma_c}, {"gamma_s", c.gamma_s}, {"grid", c.grid},
                     {"order", c.order},     {"rank_cap", c.rank_cap}, {"alpha", c.alpha},
                     {"dropout", c.dropout}, {"blend", c.blend}};
}

namespace detail {

// Reads every key of `j` into the fields named by `read`, rejecting keys it does not know.
template <typename F>
void read_strict(const nlohmann::json& j, const std::string& where, F&& read) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (!read(key, value)) throw ConfigError("unknown config key " + where + "." + key);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
    }
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, TiKANConfig& c) {
  detail::read_strict(j, "model.tikan", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "gamma_c") v.get_to(c.gamma_c);
    else if (k == "gamma_s") v.get_to(c.gamma_s);
    else if (k == "grid") v.get_to(c.grid);
    else if (k == "order") v.get_to(c.order);
    else if (k == "rank_cap") v.get_to(c.rank_cap);
    else if (k == "alpha") v.get_to(c.alpha);
    else if (k == "dropout") v.get_to(c.dropout);
    else if (k == "blend") v.get_to(c.blend);
    else return false;
    return true;
  });
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"widths", c.widths},
                     {"in_channels", c.in_channels},
                     {"num_classes", c.num_classes},
                     {"kernels", c.kernels},
                     {"aux_weights", c.aux_weights},
                     {"tikan", c.tikan},
                     {"head_fusion", c.head_fusion},
                     {"upsample", c.upsample},
                     {"input_size", c.input_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::read_strict(j, "model", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "levels") v.get_to(c.levels);
    else if (k == "widths") v.get_to(c.widths);
    else if (k == "in_channels") v.get_to(c.in_channels);
    else if (k == "num_classes") v.get_to(c.num_classes);
    else if (k == "kernels") v.get_to(c.kernels);
    else if (k == "aux_weights") v.get_to(c.aux_weights);
    else if (k == "tikan") v.get_to(c.tikan);
    else if (k == "head_fusion") v.get_to(c.head_fusion);
    else if (k == "upsample") v.get_to(c.upsample);
    else if (k == "input_size") v.get_to(c.input_size);
    else return false;
    return true;
  });
}

template <Scalar T>
struct ModelOutput {
  Var<T> final;
  std::vector<Var<T>> aux;  // decoder levels 2, 3, 4 (halving resolution each)
  std::vector<Shape> encoder_shapes;  // E_1 .. E_J
};

template <Scalar T>
class FortressModel {
 public:
  static FortressModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    FortressModel m;
    m.cfg_ = cfg;
    Rng rng(seed);
    const std::size_t J = cfg.levels;
    for (std::size_t j = 1; j <= J; ++j) {
      const std::size_t c_in = j == 1 ? cfg.in_channels : cfg.width(j - 1);
      m.encoder_.push_back(make_kan_double_conv(m.store_, "encoder." + std::to_string(j), c_in, cfg.width(j),
                                                cfg.encoder_has_tikan(j), cfg.tikan, rng));
    }
    m.attention_.resize(J);
    m.decoder_.resize(J);
    m.fusion_.resize(J, nullptr);
    for (std::size_t d = J - 1; d >= 1; --d) {
      const std::string p = "decoder." + std::to_string(d);
      const std::size_t c = cfg.width(d);
      m.attention_[d] = make_attention(m.store_, p + ".attention", c, cfg.kernel_at(d), rng);
      m.decoder_[d] = make_kan_double_conv(m.store_, p + ".block", c + cfg.width(d + 1), c, cfg.decoder_has_tikan(d),
                                           cfg.tikan, rng);
      m.fusion_[d] = &m.store_.add(p + ".fusion", init::pointwise<T>(3 * c, c, rng));
    }
    m.final_head_ = make_head(m.store_, "head.final", cfg.width(1), cfg.num_classes, rng);
    for (std::size_t i = 0; i < cfg.aux_heads(); ++i) {
      const std::size_t d = i + 2;
      m.aux_heads_.push_back(make_head(m.store_, "head.aux" + std::to_string(d), cfg.width(d), cfg.num_classes, rng));
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  std::size_t param_count() const { return store_.param_count(); }

  const KANDoubleConv<T>& encoder_block(std::size_t j) const { return encoder_.at(j - 1); }
  const KANDoubleConv<T>& decoder_block(std::size_t d) const { return decoder_.at(d); }

  /// Number of instantiated TiKAN modules.
  std::size_t tikan_sites() const {
    std::size_t n = 0;
    for (const auto& b : encoder_) n += b.tikan.has_value();
    for (std::size_t d = 1; d < decoder_.size(); ++d) n += decoder_[d].tikan.has_value();
    return n;
  }

  /// Runs the network. `rng` drives TiKAN dropout and is required in training mode.
  ModelOutput<T> forward(Tape<T>& tape, const Var<T>& x, bool training, Rng* rng = nullptr) {
    const Shape s = x.shape();
    const std::size_t J = cfg_.levels;
    if (s.c != cfg_.in_channels) {
      throw ConfigError("model expects " + std::to_string(cfg_.in_channels) + " input channels, got " + s.str());
    }
    if (s.h % cfg_.divisor() != 0 || s.w % cfg_.divisor() != 0 || s.h == 0 || s.w == 0) {
      throw ConfigError("input spatial size must be a positive multiple of " + std::to_string(cfg_.divisor()) +
                        ", got " + s.str());
    }
    const auto mode = cfg_.upsample == "nearest" ? ops::ResizeMode::nearest : ops::ResizeMode::bilinear;

    std::vector<Var<T>> enc(J + 1);
    for (std::size_t j = 1; j <= J; ++j) {
      Var<T> in = j == 1 ? x : ops::pool(tape, enc[j - 1], ops::PoolKind::max2x2);
      enc[j] = block(tape, in, encoder_[j - 1], training, rng);
    }

    ModelOutput<T> out;
    for (std::size_t j = 1; j <= J; ++j) out.encoder_shapes.push_back(enc[j].shape());
    out.aux.resize(cfg_.aux_heads());
    Var<T> r = enc[J];
    for (std::size_t d = J - 1; d >= 1; --d) {
      const AttentionParams<T>& att = attention_[d];
      auto skip = spatial_attention(tape, channel_attention(tape, enc[d], att), att);
      auto up = ops::resize2x(tape, r, mode);
      auto rd = block(tape, ops::concat_channels(tape, skip, up), decoder_[d], training, rng);

      const Shape rs = rd.shape();
      const bool kan_on = decoder_[d].tikan.has_value() && gate(rs.c, rs.h, rs.w, cfg_.tikan);
      auto kan = kan_on ? tikan_apply(tape, rd, *decoder_[d].tikan, cfg_.tikan, training, rng) : rd;
      r = fuse_branches(tape, spatial_attention(tape, rd, att), channel_attention(tape, rd, att), kan, *fusion_[d]);

      if (d == 1) out.final = prediction_head(tape, r, final_head_);
      else if (d - 2 < aux_heads_.size()) out.aux[d - 2] = prediction_head(tape, r, aux_heads_[d - 2]);
    }
    return out;
  }

  /// Eval-mode logits; with head fusion the aux logits, bilinearly resized to
  /// full resolution and scaled by beta_d, are added to the final logits.
  Tensor<T> predict_logits(const Tensor<T>& images, bool head_fusion) {
    Tape<T> tape(false);
    auto out = forward(tape, tape.constant(images), false);
    Tensor<T> logits = out.final.value();
    if (head_fusion) {
      for (std::size_t i = 0; i < out.aux.size(); ++i) {
        const T beta = static_cast<T>(cfg_.aux_weights[i]);
        const Tensor<T> up = resize_bilinear(out.aux[i].value(), logits.shape().h, logits.shape().w);
        for (std::size_t k = 0; k < logits.numel(); ++k) logits[k] += beta * up[k];
      }
    }
    return logits;
  }

  LabelMap predict(const Tensor<T>& images, bool head_fusion) {
    return argmax_channels(predict_logits(images, head_fusion));
  }

  static LabelMap argmax_channels(const Tensor<T>& logits) {
    const Shape s = logits.shape();
    LabelMap mask(s.n, s.h, s.w);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < s.plane(); ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < s.c; ++c)
          if (logits[logits.offset(n, c, 0, 0) + p] > logits[logits.offset(n, best, 0, 0) + p]) best = c;
        mask.data[n * s.plane() + p] = static_cast<std::int32_t>(best);
      }
    return mask;
  }

  static Tensor<T> resize_bilinear(const Tensor<T>& in, std::size_t h, std::size_t w) {
    return ops::resize_bilinear_values(in, h, w);
  }

 private:
  FortressModel() = default;

  Var<T> block(Tape<T>& tape, const Var<T>& in, const KANDoubleConv<T>& b, bool training, Rng* rng) {
    // The block's own output shape decides the gate: TiKAN acts on C_out channels at the input resolution.
    const Shape s = in.shape();
    const bool fire = b.tikan.has_value() && gate(b.c_out, s.h, s.w, cfg_.tikan);
    return kan_double_conv(tape, in, b, fire, cfg_.tikan, training, rng);
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::vector<KANDoubleConv<T>> encoder_;
  std::vector<AttentionParams<T>> attention_;  // indexed by decoder level d
  std::vector<KANDoubleConv<T>> decoder_;      // indexed by decoder level d
  std::vector<Parameter<T>*> fusion_;
  HeadParams<T> final_head_;
  std::vector<HeadParams<T>> aux_heads_;
};

}  // namespace fortress
