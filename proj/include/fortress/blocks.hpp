#pragma once

#include <optional>
#include <string>

#include "fortress/ops.hpp"
#include "fortress/params.hpp"
#include "fortress/tikan.hpp"

namespace fortress {

/// Depthwise 3x3 -> pointwise -> BatchNorm -> ReLU. No conv biases.
template <Scalar T>
struct DSConvUnit {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 3;
  Parameter<T>* dw = nullptr;  // (C_in, 1, k, k)
  Parameter<T>* pw = nullptr;  // (C_out, C_in, 1, 1)
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;

  /// 9 C_in + C_in C_out + 2 C_out for k = 3.
  std::size_t param_count() const { return k * k * c_in + c_in * c_out + 2 * c_out; }
};

template <Scalar T>
DSConvUnit<T> make_ds_unit(ParamStore<T>& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                           Rng& rng) {
  DSConvUnit<T> u;
  u.c_in = c_in;
  u.c_out = c_out;
  u.dw = &store.add(prefix + ".dw", init::depthwise<T>(c_in, u.k, rng));
  u.pw = &store.add(prefix + ".pw", init::pointwise<T>(c_in, c_out, rng));
  u.gamma = &store.add(prefix + ".bn.gamma", Tensor<T>({1, c_out, 1, 1}, T(1)));
  u.beta = &store.add(prefix + ".bn.beta", Tensor<T>({1, c_out, 1, 1}, T(0)));
  u.running_mean = &store.add_buffer(prefix + ".bn.running_mean", Tensor<T>({1, c_out, 1, 1}, T(0)));
  u.running_var = &store.add_buffer(prefix + ".bn.running_var", Tensor<T>({1, c_out, 1, 1}, T(1)));
  return u;
}

template <Scalar T>
Var<T> ds_conv_forward(Tape<T>& tape, const Var<T>& x, const DSConvUnit<T>& u, bool training) {
  if (x.shape().c != u.c_in) {
    throw ConfigError("ds_conv: input has " + std::to_string(x.shape().c) + " channels, unit expects " +
                      std::to_string(u.c_in));
  }
  auto y = ops::conv2d(tape, x, tape.param(*u.dw), {}, {u.c_in, 1, u.k / 2});
  y = ops::conv2d(tape, y, tape.param(*u.pw), {}, {});
  y = ops::batchnorm(tape, y, tape.param(*u.gamma), tape.param(*u.beta),
                     ops::BatchNormStats<T>{u.running_mean, u.running_var}, training);
  return ops::relu(tape, y);
}

/// Two DS units with a micro-residual, optional TiKAN, and an outer residual.
template <Scalar T>
struct KANDoubleConv {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  DSConvUnit<T> ds1;
  DSConvUnit<T> ds2;
  Parameter<T>* proj = nullptr;  // (C_out, C_in, 1, 1) when C_in != C_out
  std::optional<TiKANParams<T>> tikan;
};

template <Scalar T>
KANDoubleConv<T> make_kan_double_conv(ParamStore<T>& store, const std::string& prefix, std::size_t c_in,
                                      std::size_t c_out, bool with_tikan, const TiKANConfig& tcfg, Rng& rng) {
  KANDoubleConv<T> b;
  b.c_in = c_in;
  b.c_out = c_out;
  b.ds1 = make_ds_unit(store, prefix + ".ds1", c_in, c_out, rng);
  b.ds2 = make_ds_unit(store, prefix + ".ds2", c_out, c_out, rng);
  if (c_in != c_out) b.proj = &store.add(prefix + ".proj", init::pointwise<T>(c_in, c_out, rng));
  if (with_tikan) b.tikan = make_tikan(store, prefix + ".tikan", c_out, tcfg, rng);
  return b;
}

/// y = project(x) + T(f1 + ds2(f1)), f1 = ds1(x). T is tikan_apply when
/// gate_result holds, identity otherwise.
template <Scalar T>
Var<T> kan_double_conv(Tape<T>& tape, const Var<T>& x, const KANDoubleConv<T>& b, bool gate_result,
                       const TiKANConfig& tcfg, bool training, Rng* rng) {
  auto f1 = ds_conv_forward(tape, x, b.ds1, training);
  auto f2 = ds_conv_forward(tape, f1, b.ds2, training);
  auto t = ops::add(tape, f1, f2);
  if (gate_result) {
    if (!b.tikan) throw ContractError("gate fired on a block without TiKAN parameters");
    t = tikan_apply(tape, t, *b.tikan, tcfg, training, rng);
  }
  auto res = b.proj ? ops::conv2d(tape, x, tape.param(*b.proj), {}, {}) : x;
  return ops::add(tape, res, t);
}

/// CBAM-style attention pair for one decoder level.
template <Scalar T>
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t k = 3;
  Parameter<T>* sp_dw = nullptr;  // (2, 1, k, k)
  Parameter<T>* sp_pw = nullptr;  // (1, 2, 1, 1)
  Parameter<T>* ch_w1 = nullptr;  // (C/16, C, 1, 1)
  Parameter<T>* ch_b1 = nullptr;
  Parameter<T>* ch_w2 = nullptr;  // (C, C/16, 1, 1)
  Parameter<T>* ch_b2 = nullptr;
};

inline std::size_t channel_bottleneck(std::size_t c) { return std::max<std::size_t>(c / 16, 1); }

inline void check_attention_kernel(std::size_t k) {
  if (k != 3 && k != 5 && k != 7) throw ConfigError("spatial attention kernel must be 3, 5 or 7, got " + std::to_string(k));
}

template <Scalar T>
AttentionParams<T> make_attention(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                                  std::size_t k, Rng& rng) {
  check_attention_kernel(k);
  AttentionParams<T> a;
  a.channels = channels;
  a.k = k;
  const std::size_t r = channel_bottleneck(channels);
  a.sp_dw = &store.add(prefix + ".spatial.dw", init::depthwise<T>(2, k, rng));
  a.sp_pw = &store.add(prefix + ".spatial.pw", init::pointwise<T>(2, 1, rng));
  a.ch_w1 = &store.add(prefix + ".channel.w1", init::pointwise<T>(channels, r, rng));
  a.ch_b1 = &store.add(prefix + ".channel.b1", Tensor<T>({r, 1, 1, 1}, T(0)));
  a.ch_w2 = &store.add(prefix + ".channel.w2", init::pointwise<T>(r, channels, rng));
  a.ch_b2 = &store.add(prefix + ".channel.b2", Tensor<T>({channels, 1, 1, 1}, T(0)));
  return a;
}

/// sigmoid(DS_k([mean_c(x); max_c(x)])) * x, map shape (N,1,H,W).
template <Scalar T>
Var<T> spatial_attention(Tape<T>& tape, const Var<T>& x, const AttentionParams<T>& a) {
  check_attention_kernel(a.k);
  auto desc = ops::concat_channels(tape, ops::pool(tape, x, ops::PoolKind::channel_mean),
                                   ops::pool(tape, x, ops::PoolKind::channel_max));
  auto m = ops::conv2d(tape, desc, tape.param(*a.sp_dw), {}, {2, 1, a.k / 2});
  m = ops::conv2d(tape, m, tape.param(*a.sp_pw), {}, {});
  return ops::mul(tape, x, ops::sigmoid(tape, m));
}

/// sigmoid(MLP(avg(x)) + MLP(max(x))) * x, weights shape (N,C,1,1).
template <Scalar T>
Var<T> channel_attention(Tape<T>& tape, const Var<T>& x, const AttentionParams<T>& a) {
  if (x.shape().c != a.channels) throw ConfigError("channel attention: channel count mismatch");
  auto mlp = [&](const Var<T>& v) {
    auto h = ops::conv2d(tape, v, tape.param(*a.ch_w1), tape.param(*a.ch_b1), {});
    h = ops::relu(tape, h);
    return ops::conv2d(tape, h, tape.param(*a.ch_w2), tape.param(*a.ch_b2), {});
  };
  auto s = ops::add(tape, mlp(ops::pool(tape, x, ops::PoolKind::global_avg)),
                    mlp(ops::pool(tape, x, ops::PoolKind::global_max)));
  return ops::mul(tape, x, ops::sigmoid(tape, s));
}

/// 1x1 conv (C x 3C, no bias) over [spatial; channel; kan].
template <Scalar T>
Var<T> fuse_branches(Tape<T>& tape, const Var<T>& spatial, const Var<T>& channel, const Var<T>& kan,
                     Parameter<T>& weight) {
  if (!(spatial.shape() == channel.shape()) || !(spatial.shape() == kan.shape())) {
    throw ConfigError("fuse_branches: branch shapes differ: " + spatial.shape().str() + ", " +
                      channel.shape().str() + ", " + kan.shape().str());
  }
  auto cat = ops::concat_channels(tape, ops::concat_channels(tape, spatial, channel), kan);
  return ops::conv2d(tape, cat, tape.param(weight), {}, {});
}

/// Depthwise 1x1 (no bias) -> pointwise to K classes with bias.
template <Scalar T>
struct HeadParams {
  std::size_t channels = 0;
  std::size_t classes = 0;
  Parameter<T>* dw = nullptr;  // (C, 1, 1, 1)
  Parameter<T>* pw = nullptr;  // (K, C, 1, 1)
  Parameter<T>* bias = nullptr;

  std::size_t param_count() const { return channels + channels * classes + classes; }
};

template <Scalar T>
HeadParams<T> make_head(ParamStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t classes,
                        Rng& rng) {
  HeadParams<T> h;
  h.channels = channels;
  h.classes = classes;
  h.dw = &store.add(prefix + ".dw", init::depthwise<T>(channels, 1, rng));
  h.pw = &store.add(prefix + ".pw", init::pointwise<T>(channels, classes, rng));
  h.bias = &store.add(prefix + ".bias", Tensor<T>({classes, 1, 1, 1}, T(0)));
  return h;
}

template <Scalar T>
Var<T> prediction_head(Tape<T>& tape, const Var<T>& x, const HeadParams<T>& h) {
  auto y = ops::conv2d(tape, x, tape.param(*h.dw), {}, {h.channels, 1, 0});
  return ops::conv2d(tape, y, tape.param(*h.pw), tape.param(*h.bias), {});
}

}  // namespace fortress
