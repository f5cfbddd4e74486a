#pragma once

// Differentiable operations over Var. Each op computes its forward value
// eagerly and, when any input needs a gradient, records a closure that
// accumulates input gradients in a fixed loop order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#include "fortress/autograd.hpp"
#include "fortress/bspline.hpp"
#include "fortress/conv_kernels.hpp"
#include "fortress/rng.hpp"
#include "fortress/tensor.hpp"

namespace fortress {

/// Per-pixel class indices, (N, H, W) row-major.
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(n_ * h_ * w_, fill) {}
  std::size_t size() const { return data.size(); }
  std::int32_t& at(std::size_t i, std::size_t y, std::size_t x) { return data[(i * h + y) * w + x]; }
  std::int32_t at(std::size_t i, std::size_t y, std::size_t x) const { return data[(i * h + y) * w + x]; }
  bool operator==(const LabelMap&) const = default;
};

namespace ops {

using kernels::ConvGeometry;

// ---------------------------------------------------------------- convolution

template <Scalar T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w,
              const std::optional<std::type_identity_t<Var<T>>>& bias, const ConvGeometry& geom) {
  Tensor<T> y = kernels::conv2d_forward(x.value(), w.value(), bias ? &bias->value() : nullptr, geom);
  if (bias) {
    return tape.record("conv2d", std::move(y), {x, w, *bias}, [xp = x.ptr(), wp = w.ptr(), bp = bias->ptr(), geom] {
      return [xp, wp, bp, geom](Node<T>& self) {
        kernels::conv2d_backward(xp->val(), wp->val(), self.grad, geom, grad_sink(xp), grad_sink(wp), grad_sink(bp));
      };
    });
  }
  return tape.record("conv2d", std::move(y), {x, w}, [xp = x.ptr(), wp = w.ptr(), geom] {
    return [xp, wp, geom](Node<T>& self) {
      kernels::conv2d_backward<T>(xp->val(), wp->val(), self.grad, geom, grad_sink(xp), grad_sink(wp), nullptr);
    };
  });
}

// -------------------------------------------------------------------- pooling

enum class PoolKind { max2x2, global_avg, global_max, channel_mean, channel_max };

template <Scalar T>
Var<T> pool(Tape<T>& tape, const Var<T>& x, PoolKind kind) {
  const Tensor<T>& in = x.value();
  const Shape s = in.shape();
  switch (kind) {
    case PoolKind::max2x2: {
      if (s.h % 2 != 0 || s.w % 2 != 0) throw ConfigError("max2x2 pooling needs even spatial dims, got " + s.str());
      Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
      std::vector<std::uint32_t> arg(out.numel());
      std::size_t o = 0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t y = 0; y < s.h / 2; ++y)
            for (std::size_t xx = 0; xx < s.w / 2; ++xx, ++o) {
              std::size_t best = in.offset(n, c, 2 * y, 2 * xx);
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const std::size_t idx = in.offset(n, c, 2 * y + dy, 2 * xx + dx);
                  if (in[idx] > in[best]) best = idx;
                }
              out[o] = in[best];
              arg[o] = static_cast<std::uint32_t>(best);
            }
      return tape.record("max_pool2x2", std::move(out), {x}, [xp = x.ptr(), arg = std::move(arg)] {
        return [xp, arg](Node<T>& self) {
          Tensor<T>& gx = xp->ensure_grad();
          for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
        };
      });
    }
    case PoolKind::global_avg: {
      Tensor<T> out({s.n, s.c, 1, 1});
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
          T acc = 0;
          for (T v : in.plane(n, c)) acc += v;
          out.at(n, c, 0, 0) = acc / static_cast<T>(s.plane());
        }
      return tape.record("global_avg_pool", std::move(out), {x}, [xp = x.ptr(), s] {
        return [xp, s](Node<T>& self) {
          Tensor<T>& gx = xp->ensure_grad();
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
              const T g = self.grad.at(n, c, 0, 0) / static_cast<T>(s.plane());
              for (T& v : gx.plane(n, c)) v += g;
            }
        };
      });
    }
    case PoolKind::global_max: {
      Tensor<T> out({s.n, s.c, 1, 1});
      std::vector<std::uint32_t> arg(out.numel());
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
          const auto p = in.plane(n, c);
          const std::size_t best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
          out.at(n, c, 0, 0) = p[best];
          arg[n * s.c + c] = static_cast<std::uint32_t>(in.offset(n, c, 0, 0) + best);
        }
      return tape.record("global_max_pool", std::move(out), {x}, [xp = x.ptr(), arg = std::move(arg)] {
        return [xp, arg](Node<T>& self) {
          Tensor<T>& gx = xp->ensure_grad();
          for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
        };
      });
    }
    case PoolKind::channel_mean: {
      Tensor<T> out({s.n, 1, s.h, s.w});
      for (std::size_t n = 0; n < s.n; ++n) {
        auto dst = out.plane(n, 0);
        for (std::size_t c = 0; c < s.c; ++c) {
          const auto src = in.plane(n, c);
          for (std::size_t p = 0; p < s.plane(); ++p) dst[p] += src[p];
        }
        for (T& v : dst) v /= static_cast<T>(s.c);
      }
      return tape.record("channel_mean", std::move(out), {x}, [xp = x.ptr(), s] {
        return [xp, s](Node<T>& self) {
          Tensor<T>& gx = xp->ensure_grad();
          for (std::size_t n = 0; n < s.n; ++n) {
            const auto g = self.grad.plane(n, 0);
            for (std::size_t c = 0; c < s.c; ++c) {
              auto dst = gx.plane(n, c);
              for (std::size_t p = 0; p < s.plane(); ++p) dst[p] += g[p] / static_cast<T>(s.c);
            }
          }
        };
      });
    }
    case PoolKind::channel_max: {
      Tensor<T> out({s.n, 1, s.h, s.w});
      std::vector<std::uint32_t> arg(out.numel());
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < s.plane(); ++p) {
          std::size_t best = in.offset(n, 0, 0, 0) + p;
          for (std::size_t c = 1; c < s.c; ++c) {
            const std::size_t idx = in.offset(n, c, 0, 0) + p;
            if (in[idx] > in[best]) best = idx;
          }
          out[n * s.plane() + p] = in[best];
          arg[n * s.plane() + p] = static_cast<std::uint32_t>(best);
        }
      return tape.record("channel_max", std::move(out), {x}, [xp = x.ptr(), arg = std::move(arg)] {
        return [xp, arg](Node<T>& self) {
          Tensor<T>& gx = xp->ensure_grad();
          for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
        };
      });
    }
  }
  throw ConfigError("unknown pool kind");
}

// ------------------------------------------------------------------- resizing

enum class ResizeMode { bilinear, nearest };

namespace detail {

struct Tap2 {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel-aligned source taps for doubling one axis.
inline std::vector<Tap2> upsample_taps(std::size_t in, ResizeMode mode) {
  std::vector<Tap2> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    if (mode == ResizeMode::nearest) {
      taps[o] = {o / 2, o / 2, 1.0, 0.0};
      continue;
    }
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

template <Scalar T>
Var<T> resize2x(Tape<T>& tape, const Var<T>& x, ResizeMode mode) {
  const Shape s = x.shape();
  const Tensor<T>& in = x.value();
  Tensor<T> out({s.n, s.c, 2 * s.h, 2 * s.w});
  if (s.numel() == 0) return tape.record("resize2x", std::move(out), {x}, [] { return [](Node<T>&) {}; });
  auto ty = detail::upsample_taps(s.h, mode);
  auto tx = detail::upsample_taps(s.w, mode);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = in.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < 2 * s.w; ++ox) {
          const auto& b = tx[ox];
          const double v = a.w0 * (b.w0 * src[a.i0 * s.w + b.i0] + b.w1 * src[a.i0 * s.w + b.i1]) +
                           a.w1 * (b.w0 * src[a.i1 * s.w + b.i0] + b.w1 * src[a.i1 * s.w + b.i1]);
          dst[oy * 2 * s.w + ox] = static_cast<T>(v);
        }
      }
    }
  const char* name = mode == ResizeMode::bilinear ? "resize2x_bilinear" : "resize2x_nearest";
  return tape.record(name, std::move(out), {x}, [xp = x.ptr(), s, ty = std::move(ty), tx = std::move(tx)] {
    return [xp, s, ty, tx](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
          const auto g = self.grad.plane(n, c);
          auto dst = gx.plane(n, c);
          for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < 2 * s.w; ++ox) {
              const auto& b = tx[ox];
              const double gv = g[oy * 2 * s.w + ox];
              dst[a.i0 * s.w + b.i0] += static_cast<T>(gv * a.w0 * b.w0);
              dst[a.i0 * s.w + b.i1] += static_cast<T>(gv * a.w0 * b.w1);
              dst[a.i1 * s.w + b.i0] += static_cast<T>(gv * a.w1 * b.w0);
              dst[a.i1 * s.w + b.i1] += static_cast<T>(gv * a.w1 * b.w1);
            }
          }
        }
    };
  });
}

// ---------------------------------------------------------------- elementwise

/// Half-pixel-aligned bilinear resize of every plane to (h, w); values only, no tape.
template <Scalar T>
Tensor<T> resize_bilinear_values(const Tensor<T>& in, std::size_t h, std::size_t w) {
  const Shape s = in.shape();
  Tensor<T> out({s.n, s.c, h, w});
  auto taps = [](std::size_t src, std::size_t dst) {
    std::vector<std::tuple<std::size_t, std::size_t, double>> t(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t o = 0; o < dst; ++o) {
      double f = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
      std::size_t i0 = std::min(static_cast<std::size_t>(f), src - 1);
      t[o] = {i0, std::min(i0 + 1, src - 1), f - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(s.h, h), tx = taps(s.w, w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = in.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t y = 0; y < h; ++y) {
        const auto [y0, y1, fy] = ty[y];
        for (std::size_t x = 0; x < w; ++x) {
          const auto [x0, x1, fx] = tx[x];
          const double top = (1 - fx) * src[y0 * s.w + x0] + fx * src[y0 * s.w + x1];
          const double bot = (1 - fx) * src[y1 * s.w + x0] + fx * src[y1 * s.w + x1];
          dst[y * w + x] = static_cast<T>((1 - fy) * top + fy * bot);
        }
      }
    }
  return out;
}

template <Scalar T>
T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <Scalar T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.span()) v = v > T(0) ? v : T(0);
  return tape.record("relu", std::move(out), {x}, [xp = x.ptr()] {
    return [xp](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      const Tensor<T>& in = xp->val();
      for (std::size_t i = 0; i < in.numel(); ++i)
        if (in[i] > T(0)) gx[i] += self.grad[i];
    };
  });
}

template <Scalar T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.span()) v = sigmoid_scalar(v);
  return tape.record("sigmoid", std::move(out), {x}, [xp = x.ptr()] {
    return [xp](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      const Tensor<T>& y = self.val();
      for (std::size_t i = 0; i < y.numel(); ++i) gx[i] += self.grad[i] * y[i] * (T(1) - y[i]);
    };
  });
}

template <Scalar T>
Var<T> silu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.span()) v = v * sigmoid_scalar(v);
  return tape.record("silu", std::move(out), {x}, [xp = x.ptr()] {
    return [xp](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      const Tensor<T>& in = xp->val();
      for (std::size_t i = 0; i < in.numel(); ++i) {
        const T s = sigmoid_scalar(in[i]);
        gx[i] += self.grad[i] * (s * (T(1) + in[i] * (T(1) - s)));
      }
    };
  });
}

template <Scalar T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.span()) v *= factor;
  return tape.record("scale", std::move(out), {x}, [xp = x.ptr(), factor] {
    return [xp, factor](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += factor * self.grad[i];
    };
  });
}

namespace detail {

// b broadcasts to a when each of its axes equals a's or is 1.
inline void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  auto ok = [](std::size_t x, std::size_t y) { return x == y || y == 1; };
  if (!(ok(a.n, b.n) && ok(a.c, b.c) && ok(a.h, b.h) && ok(a.w, b.w))) {
    throw ConfigError(std::string(op) + ": shape " + b.str() + " does not broadcast to " + a.str());
  }
}

inline std::size_t bcast_index(const Shape& b, std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
  return (((b.n == 1 ? 0 : n) * b.c + (b.c == 1 ? 0 : c)) * b.h + (b.h == 1 ? 0 : y)) * b.w + (b.w == 1 ? 0 : x);
}

template <typename F>
void for_each_bcast(const Shape& a, const Shape& b, F&& f) {
  std::size_t i = 0;
  for (std::size_t n = 0; n < a.n; ++n)
    for (std::size_t c = 0; c < a.c; ++c)
      for (std::size_t y = 0; y < a.h; ++y)
        for (std::size_t x = 0; x < a.w; ++x, ++i) f(i, bcast_index(b, n, c, y, x));
}

}  // namespace detail

/// a + b, with b broadcast over its singleton axes.
template <Scalar T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  } else {
    detail::for_each_bcast(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { out[i] += bv[j]; });
  }
  return tape.record("add", std::move(out), {a, b}, [ap = a.ptr(), bp = b.ptr()] {
    return [ap, bp](Node<T>& self) {
      if (Tensor<T>* ga = grad_sink(ap)) *ga += self.grad;
      if (Tensor<T>* gb = grad_sink(bp)) {
        detail::for_each_bcast(self.grad.shape(), gb->shape(),
                               [&](std::size_t i, std::size_t j) { (*gb)[j] += self.grad[i]; });
      }
    };
  });
}

/// a * b (elementwise), with b broadcast over its singleton axes.
template <Scalar T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  detail::for_each_bcast(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { out[i] *= bv[j]; });
  return tape.record("mul", std::move(out), {a, b}, [ap = a.ptr(), bp = b.ptr()] {
    return [ap, bp](Node<T>& self) {
      const Tensor<T>& av = ap->val();
      const Tensor<T>& bv = bp->val();
      Tensor<T>* ga = grad_sink(ap);
      Tensor<T>* gb = grad_sink(bp);
      detail::for_each_bcast(self.grad.shape(), bv.shape(), [&](std::size_t i, std::size_t j) {
        if (ga) (*ga)[i] += self.grad[i] * bv[j];
        if (gb) (*gb)[j] += self.grad[i] * av[i];
      });
    };
  });
}

/// Inverted dropout: zeroes with probability `rate`, scales survivors by 1/(1-rate).
template <Scalar T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.value().numel());
  for (T& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return tape.record("dropout", std::move(out), {x}, [xp = x.ptr(), mask = std::move(mask)] {
    return [xp, mask](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
    };
  });
}

// ------------------------------------------------------------------ reduction

template <Scalar T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  // Neumaier-compensated so the scalar loss is close to correctly rounded
  double acc = 0.0, comp = 0.0;
  for (T v : x.value().span()) {
    const double t = acc + static_cast<double>(v);
    comp += std::abs(acc) >= std::abs(static_cast<double>(v)) ? (acc - t) + v : (v - t) + acc;
    acc = t;
  }
  return tape.record("sum", Tensor<T>({1, 1, 1, 1}, static_cast<T>(acc + comp)), {x}, [xp = x.ptr()] {
    return [xp](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      for (T& v : gx.span()) v += self.grad[0];
    };
  });
}

template <Scalar T>
Var<T> mean(Tape<T>& tape, const Var<T>& x) {
  return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.value().numel()));
}

// ------------------------------------------------------------------- channels

template <Scalar T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ConfigError("concat_channels: " + sa.str() + " and " + sb.str() + " differ outside the channel axis");
  }
  Tensor<T> out({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = sa.c * sa.plane();
  const std::size_t pb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().data() + n * pa, pa, out.data() + n * (pa + pb));
    std::copy_n(b.value().data() + n * pb, pb, out.data() + n * (pa + pb) + pa);
  }
  return tape.record("concat_channels", std::move(out), {a, b}, [ap = a.ptr(), bp = b.ptr(), pa, pb, n = sa.n] {
    return [ap, bp, pa, pb, n](Node<T>& self) {
      Tensor<T>* ga = grad_sink(ap);
      Tensor<T>* gb = grad_sink(bp);
      for (std::size_t i = 0; i < n; ++i) {
        const T* g = self.grad.data() + i * (pa + pb);
        if (ga)
          for (std::size_t j = 0; j < pa; ++j) ga->data()[i * pa + j] += g[j];
        if (gb)
          for (std::size_t j = 0; j < pb; ++j) gb->data()[i * pb + j] += g[pa + j];
      }
    };
  });
}

template <Scalar T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t end) {
  const Shape s = x.shape();
  if (begin > end || end > s.c) throw ConfigError("slice_channels: range out of bounds");
  Tensor<T> out({s.n, end - begin, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(x.value().data() + x.value().offset(n, begin, 0, 0), (end - begin) * s.plane(),
                out.data() + out.offset(n, 0, 0, 0));
  return tape.record("slice_channels", std::move(out), {x}, [xp = x.ptr(), s, begin, end] {
    return [xp, s, begin, end](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      const std::size_t len = (end - begin) * s.plane();
      for (std::size_t n = 0; n < s.n; ++n) {
        T* dst = gx.data() + gx.offset(n, begin, 0, 0);
        const T* g = self.grad.data() + n * len;
        for (std::size_t j = 0; j < len; ++j) dst[j] += g[j];
      }
    };
  });
}

// -------------------------------------------------------------------- softmax

template <Scalar T>
Tensor<T> softmax_channel_values(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < s.plane(); ++p) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits[logits.offset(n, c, 0, 0) + p]);
      T z = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(logits[logits.offset(n, c, 0, 0) + p] - mx);
        out[out.offset(n, c, 0, 0) + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) out[out.offset(n, c, 0, 0) + p] /= z;
    }
  return out;
}

template <Scalar T>
Var<T> softmax_channel(Tape<T>& tape, const Var<T>& logits) {
  if (logits.shape().c < 1) throw ConfigError("softmax_channel needs at least one channel");
  Tensor<T> out = softmax_channel_values(logits.value());
  return tape.record("softmax_channel", std::move(out), {logits}, [xp = logits.ptr()] {
    return [xp](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      const Tensor<T>& y = self.val();
      const Shape s = y.shape();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < s.plane(); ++p) {
          T dot = 0;
          for (std::size_t c = 0; c < s.c; ++c) dot += self.grad[y.offset(n, c, 0, 0) + p] * y[y.offset(n, c, 0, 0) + p];
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = y.offset(n, c, 0, 0) + p;
            gx[i] += y[i] * (self.grad[i] - dot);
          }
        }
    };
  });
}

/// Class-weighted cross-entropy, mean over all pixels:
/// -(1/(N*H*W)) * sum_i w[y_i] * log softmax(logits_i)[y_i].
template <Scalar T>
Var<T> weighted_cross_entropy(Tape<T>& tape, const Var<T>& logits, const LabelMap& target,
                              const std::vector<T>& weights) {
  const Shape s = logits.shape();
  if (target.n != s.n || target.h != s.h || target.w != s.w) {
    throw ConfigError("cross-entropy: target (" + std::to_string(target.n) + "," + std::to_string(target.h) + "," +
                      std::to_string(target.w) + ") does not match logits " + s.str());
  }
  if (weights.size() != s.c) throw ConfigError("cross-entropy: class weight count does not match logits channels");
  for (std::int32_t y : target.data)
    if (y < 0 || static_cast<std::size_t>(y) >= s.c) throw DataError("label " + std::to_string(y) + " out of range");
  Tensor<T> prob = softmax_channel_values(logits.value());
  const Tensor<T>& z = logits.value();
  const T inv_count = T(1) / static_cast<T>(s.n * s.plane());
  double acc = 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < s.plane(); ++p) {
      const auto y = static_cast<std::size_t>(target.data[n * s.plane() + p]);
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, z[z.offset(n, c, 0, 0) + p]);
      double lse = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) lse += std::exp(static_cast<double>(z[z.offset(n, c, 0, 0) + p] - mx));
      const double logp = static_cast<double>(z[z.offset(n, y, 0, 0) + p] - mx) - std::log(lse);
      acc -= static_cast<double>(weights[y]) * logp;
    }
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(acc * static_cast<double>(inv_count)));
  return tape.record("weighted_cross_entropy", std::move(out), {logits},
                     [xp = logits.ptr(), prob = std::move(prob), target, weights, inv_count] {
                       return [xp, prob, target, weights, inv_count](Node<T>& self) {
                         Tensor<T>& gx = xp->ensure_grad();
                         const Shape s = prob.shape();
                         const T g = self.grad[0] * inv_count;
                         for (std::size_t n = 0; n < s.n; ++n)
                           for (std::size_t p = 0; p < s.plane(); ++p) {
                             const auto y = static_cast<std::size_t>(target.data[n * s.plane() + p]);
                             const T wy = weights[y] * g;
                             for (std::size_t c = 0; c < s.c; ++c) {
                               const std::size_t i = prob.offset(n, c, 0, 0) + p;
                               gx[i] += wy * (prob[i] - (c == y ? T(1) : T(0)));
                             }
                           }
                       };
                     });
}

// ------------------------------------------------------------ batch normalize

template <Scalar T>
struct BatchNormStats {
  Tensor<T>* running_mean = nullptr;  // (1,C,1,1)
  Tensor<T>* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

template <Scalar T>
Var<T> batchnorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T> stats,
                 bool training) {
  const Shape s = x.shape();
  if (gamma.value().numel() != s.c || beta.value().numel() != s.c || stats.running_mean == nullptr ||
      stats.running_var == nullptr || stats.running_mean->numel() != s.c || stats.running_var->numel() != s.c) {
    throw ConfigError("batchnorm: parameter channel count does not match input " + s.str());
  }
  const std::size_t count = s.n * s.plane();
  std::vector<T> mu(s.c), invstd(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (T v : x.value().plane(n, c)) m += v;
      m /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t n = 0; n < s.n; ++n)
        for (T v : x.value().plane(n, c)) var += (v - m) * (v - m);
      var /= static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + stats.eps));
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      T& rm = (*stats.running_mean)[c];
      T& rv = (*stats.running_var)[c];
      rm = static_cast<T>((1.0 - stats.momentum) * rm + stats.momentum * m);
      rv = static_cast<T>((1.0 - stats.momentum) * rv + stats.momentum * unbiased);
    } else {
      mu[c] = (*stats.running_mean)[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*stats.running_var)[c]) + stats.eps));
    }
  }
  Tensor<T> xhat(s);
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = x.value().plane(n, c);
      auto xh = xhat.plane(n, c);
      auto dst = out.plane(n, c);
      const T g = gamma.value()[c];
      const T b = beta.value()[c];
      for (std::size_t p = 0; p < s.plane(); ++p) {
        xh[p] = (src[p] - mu[c]) * invstd[c];
        dst[p] = g * xh[p] + b;
      }
    }
  return tape.record(
      "batchnorm", std::move(out), {x, gamma, beta},
      [xp = x.ptr(), gp = gamma.ptr(), bp = beta.ptr(), xhat = std::move(xhat), invstd = std::move(invstd), training] {
        return [xp, gp, bp, xhat, invstd, training](Node<T>& self) {
          const Shape s = xhat.shape();
          const std::size_t count = s.n * s.plane();
          Tensor<T>* gx = grad_sink(xp);
          Tensor<T>* gg = grad_sink(gp);
          Tensor<T>* gb = grad_sink(bp);
          for (std::size_t c = 0; c < s.c; ++c) {
            T sum_g = 0, sum_gx = 0;
            for (std::size_t n = 0; n < s.n; ++n) {
              const auto g = self.grad.plane(n, c);
              const auto xh = xhat.plane(n, c);
              for (std::size_t p = 0; p < s.plane(); ++p) {
                sum_g += g[p];
                sum_gx += g[p] * xh[p];
              }
            }
            if (gg) (*gg)[c] += sum_gx;
            if (gb) (*gb)[c] += sum_g;
            if (!gx) continue;
            const T gam = gp->val()[c];
            const T inv_m = T(1) / static_cast<T>(count);
            for (std::size_t n = 0; n < s.n; ++n) {
              const auto g = self.grad.plane(n, c);
              const auto xh = xhat.plane(n, c);
              auto dst = gx->plane(n, c);
              for (std::size_t p = 0; p < s.plane(); ++p) {
                if (training) {
                  dst[p] += gam * invstd[c] * (g[p] - inv_m * sum_g - xh[p] * inv_m * sum_gx);
                } else {
                  dst[p] += gam * invstd[c] * g[p];
                }
              }
            }
          }
        };
      });
}

// ------------------------------------------------------------ KAN primitives

/// Per-pixel min-max squash across channels: z_c = (x_c - min) / (max - min + eps).
template <Scalar T>
Var<T> token_minmax(Tape<T>& tape, const Var<T>& x, T eps = T(1e-6)) {
  const Shape s = x.shape();
  const Tensor<T>& in = x.value();
  Tensor<T> out(s);
  std::vector<std::uint32_t> amin(s.n * s.plane()), amax(s.n * s.plane());
  std::vector<T> range(s.n * s.plane());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < s.plane(); ++p) {
      const std::size_t t = n * s.plane() + p;
      std::size_t lo = 0, hi = 0;
      for (std::size_t c = 1; c < s.c; ++c) {
        const T v = in[in.offset(n, c, 0, 0) + p];
        if (v < in[in.offset(n, lo, 0, 0) + p]) lo = c;
        if (v > in[in.offset(n, hi, 0, 0) + p]) hi = c;
      }
      const T m = in[in.offset(n, lo, 0, 0) + p];
      const T r = in[in.offset(n, hi, 0, 0) + p] - m + eps;
      for (std::size_t c = 0; c < s.c; ++c) out[out.offset(n, c, 0, 0) + p] = (in[in.offset(n, c, 0, 0) + p] - m) / r;
      amin[t] = static_cast<std::uint32_t>(lo);
      amax[t] = static_cast<std::uint32_t>(hi);
      range[t] = r;
    }
  return tape.record("token_minmax", std::move(out), {x},
                     [xp = x.ptr(), amin = std::move(amin), amax = std::move(amax), range = std::move(range)] {
                       return [xp, amin, amax, range](Node<T>& self) {
                         Tensor<T>& gx = xp->ensure_grad();
                         const Tensor<T>& z = self.val();
                         const Shape s = z.shape();
                         for (std::size_t n = 0; n < s.n; ++n)
                           for (std::size_t p = 0; p < s.plane(); ++p) {
                             const std::size_t t = n * s.plane() + p;
                             const T inv_r = T(1) / range[t];
                             T to_min = 0, to_max = 0;
                             for (std::size_t c = 0; c < s.c; ++c) {
                               const std::size_t i = z.offset(n, c, 0, 0) + p;
                               gx[i] += self.grad[i] * inv_r;
                               to_min += self.grad[i] * (z[i] - T(1)) * inv_r;
                               to_max -= self.grad[i] * z[i] * inv_r;
                             }
                             gx[gx.offset(n, amin[t], 0, 0) + p] += to_min;
                             gx[gx.offset(n, amax[t], 0, 0) + p] += to_max;
                           }
                       };
                     });
}

/// Per-channel learnable univariate spline: out[n,c,p] = sum_j control[c,j] * B_j(clamp(z[n,c,p], 0, 1)).
/// `control` has shape (C, grid+order, 1, 1).
template <Scalar T>
Var<T> spline_map(Tape<T>& tape, const Var<T>& z, const Var<T>& control, const BSplineBasis& basis) {
  const Shape s = z.shape();
  const Shape cs = control.shape();
  if (cs.n != s.c || cs.c != basis.size() || cs.h != 1 || cs.w != 1) {
    throw ConfigError("spline_map: control shape " + cs.str() + " does not match " + std::to_string(s.c) +
                      " channels x " + std::to_string(basis.size()) + " basis functions");
  }
  const std::size_t L = basis.size();
  Tensor<T> out(s);
  std::vector<double> b(L);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* ctrl = control.value().data() + c * L;
      const auto src = z.value().plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t p = 0; p < s.plane(); ++p) {
        basis.evaluate(static_cast<double>(src[p]), b);
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += static_cast<double>(ctrl[j]) * b[j];
        dst[p] = static_cast<T>(acc);
      }
    }
  return tape.record("spline_map", std::move(out), {z, control}, [zp = z.ptr(), cp = control.ptr(), basis] {
    return [zp, cp, basis](Node<T>& self) {
      const Shape s = zp->val().shape();
      const std::size_t L = basis.size();
      Tensor<T>* gz = grad_sink(zp);
      Tensor<T>* gc = grad_sink(cp);
      std::vector<double> b(L), d(L);
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* ctrl = cp->val().data() + c * L;
        std::vector<double> cacc(L, 0.0);
        for (std::size_t n = 0; n < s.n; ++n) {
          const auto src = zp->val().plane(n, c);
          const auto g = self.grad.plane(n, c);
          for (std::size_t p = 0; p < s.plane(); ++p) {
            basis.evaluate(static_cast<double>(src[p]), b, d);
            const double gv = g[p];
            for (std::size_t j = 0; j < L; ++j) cacc[j] += gv * b[j];
            if (gz && src[p] >= T(0) && src[p] <= T(1)) {
              double dv = 0.0;
              for (std::size_t j = 0; j < L; ++j) dv += static_cast<double>(ctrl[j]) * d[j];
              gz->plane(n, c)[p] += static_cast<T>(gv * dv);
            }
          }
        }
        if (gc)
          for (std::size_t j = 0; j < L; ++j) (*gc)[c * L + j] += static_cast<T>(cacc[j]);
      }
    };
  });
}

/// Feature map (N,C,H,W) -> token matrix (N*H*W, C, 1, 1); one token per pixel.
template <Scalar T>
Var<T> to_tokens(Tape<T>& tape, const Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out({s.n * s.plane(), s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p) out[(n * s.plane() + p) * s.c + c] = x.value()[x.value().offset(n, c, 0, 0) + p];
  return tape.record("to_tokens", std::move(out), {x}, [xp = x.ptr(), s] {
    return [xp, s](Node<T>& self) {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t p = 0; p < s.plane(); ++p) gx[gx.offset(n, c, 0, 0) + p] += self.grad[(n * s.plane() + p) * s.c + c];
    };
  });
}

/// Inverse of to_tokens for a known (N, H, W) grid.
template <Scalar T>
Var<T> from_tokens(Tape<T>& tape, const Var<T>& tokens, std::size_t n_img, std::size_t h, std::size_t w) {
  const Shape ts = tokens.shape();
  if (ts.n != n_img * h * w || ts.h != 1 || ts.w != 1) {
    throw ConfigError("from_tokens: token matrix " + ts.str() + " does not fit grid " + std::to_string(n_img) + "x" +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const Shape s{n_img, ts.c, h, w};
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p) out[out.offset(n, c, 0, 0) + p] = tokens.value()[(n * s.plane() + p) * s.c + c];
  return tape.record("from_tokens", std::move(out), {tokens}, [tp = tokens.ptr(), s] {
    return [tp, s](Node<T>& self) {
      Tensor<T>& gt = tp->ensure_grad();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t p = 0; p < s.plane(); ++p) gt[(n * s.plane() + p) * s.c + c] += self.grad[self.grad.offset(n, c, 0, 0) + p];
    };
  });
}

}  // namespace ops
}  // namespace fortress
