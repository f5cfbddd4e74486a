#pragma once

// Kolmogorov-Arnold enhancement path. Tokens are single pixels, so the
// low-rank token projections are 1x1 convolutions on the feature map and
// patch/unpatch only matter at the kan_linear API boundary.

#include <algorithm>
#include <optional>
#include <string>

#include "fortress/ops.hpp"
#include "fortress/params.hpp"

namespace fortress {

struct TiKANConfig {
  std::size_t gamma_c = 16;    // minimum channels
  std::size_t gamma_s = 1024;  // maximum H*W
  std::size_t grid = 5;
  std::size_t order = 3;
  std::size_t rank_cap = 64;
  double alpha = 0.1;
  double dropout = 0.1;
  bool blend = false;  // alpha*tau + (1-alpha)*x instead of x + alpha*tau

  void validate() const {
    if (grid < 1 || order < 1) throw ConfigError("tikan grid and order must be >= 1");
    if (gamma_c < 1) throw ConfigError("tikan gamma_c must be >= 1");
    if (rank_cap < 1) throw ConfigError("tikan rank cap must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("tikan dropout must be in [0, 1)");
  }
};

/// True iff the KAN path is worth running: C >= gamma_c and H*W <= gamma_s.
inline bool gate(std::size_t channels, std::size_t height, std::size_t width, const TiKANConfig& cfg) {
  return channels >= cfg.gamma_c && height * width <= cfg.gamma_s;
}

/// min(D/4, cap), at least 1.
inline std::size_t tikan_rank(std::size_t d, std::size_t cap = 64) { return std::max<std::size_t>(1, std::min(d / 4, cap)); }

template <Scalar T>
struct KANLinearParams {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  BSplineBasis basis{5, 3};
  Parameter<T>* base_b = nullptr;    // (r, D_in, 1, 1)
  Parameter<T>* base_a = nullptr;    // (D_out, r, 1, 1)
  Parameter<T>* spline_b = nullptr;  // (r, D_in, 1, 1)
  Parameter<T>* spline_a = nullptr;  // (D_out, r, 1, 1)
  Parameter<T>* control = nullptr;   // (D_in, G+O, 1, 1)
  Parameter<T>* enhance = nullptr;   // (D_in, 1, 3, 3) depthwise
  Parameter<T>* s_base = nullptr;    // (1,1,1,1)
  Parameter<T>* s_spline = nullptr;  // (1,1,1,1)
  Parameter<T>* combine = nullptr;   // w_k, (1, D_out, 1, 1)
};

template <Scalar T>
struct TiKANParams {
  KANLinearParams<T> kan;
  Parameter<T>* alpha = nullptr;  // (1,1,1,1)
};

template <Scalar T>
KANLinearParams<T> make_kan_linear(ParamStore<T>& store, const std::string& prefix, std::size_t d_in,
                                   std::size_t d_out, std::size_t rank, const TiKANConfig& cfg, Rng& rng) {
  cfg.validate();
  if (rank < 1) throw ConfigError("kan_linear rank must be >= 1");
  KANLinearParams<T> p;
  p.d_in = d_in;
  p.d_out = d_out;
  p.rank = rank;
  p.basis = BSplineBasis(cfg.grid, cfg.order);
  p.base_b = &store.add(prefix + ".base_b", init::pointwise<T>(d_in, rank, rng));
  p.base_a = &store.add(prefix + ".base_a", init::pointwise<T>(rank, d_out, rng));
  p.spline_b = &store.add(prefix + ".spline_b", init::pointwise<T>(d_in, rank, rng));
  p.spline_a = &store.add(prefix + ".spline_a", init::pointwise<T>(rank, d_out, rng));
  p.control = &store.add(prefix + ".control", init::uniform<T>({d_in, p.basis.size(), 1, 1}, -0.1, 0.1, rng));
  p.enhance = &store.add(prefix + ".enhance", init::depthwise<T>(d_in, 3, rng));
  p.s_base = &store.add(prefix + ".s_base", Tensor<T>({1, 1, 1, 1}, T(1)));
  p.s_spline = &store.add(prefix + ".s_spline", Tensor<T>({1, 1, 1, 1}, T(1)));
  p.combine = &store.add(prefix + ".combine", Tensor<T>({1, d_out, 1, 1}, T(1)));
  return p;
}

template <Scalar T>
TiKANParams<T> make_tikan(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                          const TiKANConfig& cfg, Rng& rng) {
  TiKANParams<T> p;
  p.kan = make_kan_linear(store, prefix + ".kan", channels, channels, tikan_rank(channels, cfg.rank_cap), cfg, rng);
  p.alpha = &store.add(prefix + ".alpha", Tensor<T>({1, 1, 1, 1}, static_cast<T>(cfg.alpha)));
  return p;
}

/// kan_linear evaluated on a feature map whose pixels are the tokens:
/// w * (s_base * A B silu(x) + s_spline * A_s B_s Phi(minmax(DW_enhance(x)))).
template <Scalar T>
Var<T> kan_features(Tape<T>& tape, const Var<T>& x, const KANLinearParams<T>& p) {
  if (x.shape().c != p.d_in) {
    throw ConfigError("kan_linear: input has " + std::to_string(x.shape().c) + " channels, expected " +
                      std::to_string(p.d_in));
  }
  const ops::ConvGeometry pw{};
  auto base = ops::silu(tape, x);
  base = ops::conv2d(tape, base, tape.param(*p.base_b), {}, pw);
  base = ops::conv2d(tape, base, tape.param(*p.base_a), {}, pw);

  auto spl = ops::conv2d(tape, x, tape.param(*p.enhance), {}, {p.d_in, 1, 1});
  spl = ops::token_minmax(tape, spl);
  spl = ops::spline_map(tape, spl, tape.param(*p.control), p.basis);
  spl = ops::conv2d(tape, spl, tape.param(*p.spline_b), {}, pw);
  spl = ops::conv2d(tape, spl, tape.param(*p.spline_a), {}, pw);

  auto sum = ops::add(tape, ops::mul(tape, base, tape.param(*p.s_base)), ops::mul(tape, spl, tape.param(*p.s_spline)));
  return ops::mul(tape, sum, tape.param(*p.combine));
}

/// Token-matrix form: tokens (N*H*W, D_in, 1, 1) on an (N, H, W) pixel grid.
template <Scalar T>
Var<T> kan_linear(Tape<T>& tape, const Var<T>& tokens, std::size_t n, std::size_t h, std::size_t w,
                  const KANLinearParams<T>& p) {
  auto fmap = ops::from_tokens(tape, tokens, n, h, w);
  return ops::to_tokens(tape, kan_features(tape, fmap, p));
}

/// x + alpha * tau(x) (or the blend form). Dropout on tau in training only.
template <Scalar T>
Var<T> tikan_apply(Tape<T>& tape, const Var<T>& x, const TiKANParams<T>& p, const TiKANConfig& cfg, bool training,
                   Rng* rng) {
  const Shape s = x.shape();
  if (!gate(s.c, s.h, s.w, cfg)) {
    throw ContractError("tikan_apply called with the gate closed for " + s.str());
  }
  auto tau = kan_features(tape, x, p.kan);
  if (training && cfg.dropout > 0.0) {
    if (rng == nullptr) throw ContractError("tikan_apply needs an rng for training-mode dropout");
    tau = ops::dropout(tape, tau, cfg.dropout, *rng);
  }
  auto alpha = tape.param(*p.alpha);
  if (cfg.blend) {
    // alpha*tau + (1-alpha)*x == x + alpha*(tau - x)
    auto diff = ops::add(tape, tau, ops::scale(tape, x, T(-1)));
    return ops::add(tape, x, ops::mul(tape, diff, alpha));
  }
  return ops::add(tape, x, ops::mul(tape, tau, alpha));
}

}  // namespace fortress
