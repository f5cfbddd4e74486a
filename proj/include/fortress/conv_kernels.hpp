#pragma once

// Forward and backward convolution kernels on raw tensors. Every output
// element is produced by exactly one loop nest in a fixed order, so results
// are bitwise reproducible; OpenMP splits only over independent outputs.

#include <Eigen/Core>

#include <cstddef>
#include <string>

#include "fortress/errors.hpp"
#include "fortress/tensor.hpp"

namespace fortress::kernels {

struct ConvGeometry {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ConfigError("convolution kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

template <Scalar T>
Shape conv_output_shape(const Shape& x, const Shape& w, const ConvGeometry& g) {
  if (g.groups == 0 || g.stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  if (w.h != w.w) throw ConfigError("conv2d: kernel must be square, got " + w.str());
  if (x.c % g.groups != 0 || w.n % g.groups != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(x.c) + "->" + std::to_string(w.n) +
                      " not divisible by groups " + std::to_string(g.groups));
  }
  if (w.c != x.c / g.groups) {
    throw ConfigError("conv2d: weight " + w.str() + " incompatible with input " + x.str() + " and groups " +
                      std::to_string(g.groups));
  }
  return {x.n, w.n, conv_out_extent(x.h, w.h, g.stride, g.padding), conv_out_extent(x.w, w.w, g.stride, g.padding)};
}

namespace detail {

template <Scalar T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Scalar T>
using MapMat = Eigen::Map<RowMat<T>>;
template <Scalar T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <Scalar T>
bool is_pointwise(const Shape& w, const ConvGeometry& g) {
  return w.h == 1 && g.groups == 1 && g.stride == 1 && g.padding == 0;
}

template <Scalar T>
bool is_depthwise(const Shape& x, const Shape& w, const ConvGeometry& g) {
  return g.groups == x.c && w.n == x.c && w.c == 1 && g.stride == 1;
}

// Valid output range [lo, hi) along one axis for tap offset `tap - pad`.
inline void tap_range(std::size_t out, std::size_t in, std::size_t tap, std::size_t pad, std::size_t& lo,
                      std::size_t& hi) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t l = std::max<std::ptrdiff_t>(0, -shift);
  const std::ptrdiff_t h = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out),
                                                    static_cast<std::ptrdiff_t>(in) - shift);
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(std::max(l, h));
}

}  // namespace detail

template <Scalar T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvGeometry& g) {
  const Shape ys = conv_output_shape<T>(x.shape(), w.shape(), g);
  Tensor<T> y(ys);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const std::size_t k = ws.h;

  if (detail::is_pointwise<T>(ws, g)) {
    detail::ConstMapMat<T> wm(w.data(), ws.n, ws.c);
    for (std::size_t n = 0; n < xs.n; ++n) {
      detail::ConstMapMat<T> xm(x.data() + x.offset(n, 0, 0, 0), xs.c, xs.plane());
      detail::MapMat<T> ym(y.data() + y.offset(n, 0, 0, 0), ys.c, ys.plane());
      ym.noalias() = wm * xm;
    }
  } else if (detail::is_depthwise<T>(xs, ws, g)) {
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        const T* xp = x.data() + x.offset(n, c, 0, 0);
        T* yp = y.data() + y.offset(n, c, 0, 0);
        const T* wp = w.data() + c * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::size_t oy0, oy1;
          detail::tap_range(ys.h, xs.h, ky, g.padding, oy0, oy1);
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t ox0, ox1;
            detail::tap_range(ys.w, xs.w, kx, g.padding, ox0, ox1);
            const T wv = wp[ky * k + kx];
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>((oy + ky - g.padding) * xs.w) +
                                          static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.padding);
              T* yr = yp + oy * ys.w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xp[base + static_cast<std::ptrdiff_t>(ox)];
            }
          }
        }
      }
    }
  } else {
    const std::size_t cin_g = xs.c / g.groups;
    const std::size_t cout_g = ys.c / g.groups;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t o = 0; o < ys.c; ++o) {
        const std::size_t grp = o / cout_g;
        for (std::size_t oy = 0; oy < ys.h; ++oy) {
          for (std::size_t ox = 0; ox < ys.w; ++ox) {
            T acc = 0;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
              const std::size_t c = grp * cin_g + ci;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xs.h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                            static_cast<std::ptrdiff_t>(g.padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(xs.w)) continue;
                  acc += w.at(o, ci, ky, kx) * x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                }
              }
            }
            y.at(n, o, oy, ox) = acc;
          }
        }
      }
    }
  }

  if (bias != nullptr) {
    if (bias->numel() != ys.c) throw ConfigError("conv2d: bias length does not match output channels");
    for (std::size_t n = 0; n < ys.n; ++n)
      for (std::size_t c = 0; c < ys.c; ++c) {
        const T b = (*bias)[c];
        for (T& v : y.plane(n, c)) v += b;
      }
  }
  return y;
}

/// Accumulates (+=) into whichever of gx, gw, gb are non-null.
template <Scalar T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, const ConvGeometry& g,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Shape& ys = gy.shape();
  const std::size_t k = ws.h;

  if (gb != nullptr) {
    for (std::size_t c = 0; c < ys.c; ++c) {
      T acc = 0;
      for (std::size_t n = 0; n < ys.n; ++n)
        for (T v : gy.plane(n, c)) acc += v;
      (*gb)[c] += acc;
    }
  }

  if (detail::is_pointwise<T>(ws, g)) {
    detail::ConstMapMat<T> wm(w.data(), ws.n, ws.c);
    for (std::size_t n = 0; n < xs.n; ++n) {
      detail::ConstMapMat<T> xm(x.data() + x.offset(n, 0, 0, 0), xs.c, xs.plane());
      detail::ConstMapMat<T> gym(gy.data() + gy.offset(n, 0, 0, 0), ys.c, ys.plane());
      if (gx != nullptr) {
        detail::MapMat<T> gxm(gx->data() + gx->offset(n, 0, 0, 0), xs.c, xs.plane());
        gxm.noalias() += wm.transpose() * gym;
      }
      if (gw != nullptr) {
        detail::MapMat<T> gwm(gw->data(), ws.n, ws.c);
        gwm.noalias() += gym * xm.transpose();
      }
    }
    return;
  }

  if (detail::is_depthwise<T>(xs, ws, g)) {
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* wp = w.data() + c * k * k;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* xp = x.data() + x.offset(n, c, 0, 0);
        const T* gp = gy.data() + gy.offset(n, c, 0, 0);
        T* gxp = gx != nullptr ? gx->data() + gx->offset(n, c, 0, 0) : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::size_t oy0, oy1;
          detail::tap_range(ys.h, xs.h, ky, g.padding, oy0, oy1);
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t ox0, ox1;
            detail::tap_range(ys.w, xs.w, kx, g.padding, ox0, ox1);
            const T wv = wp[ky * k + kx];
            T wacc = 0;
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>((oy + ky - g.padding) * xs.w) +
                                          static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.padding);
              const T* gr = gp + oy * ys.w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) wacc += gr[ox] * xp[base + static_cast<std::ptrdiff_t>(ox)];
              if (gxp != nullptr) {
                for (std::size_t ox = ox0; ox < ox1; ++ox) gxp[base + static_cast<std::ptrdiff_t>(ox)] += wv * gr[ox];
              }
            }
            if (gw != nullptr) gw->data()[c * k * k + ky * k + kx] += wacc;
          }
        }
      }
    }
    return;
  }

  const std::size_t cin_g = xs.c / g.groups;
  const std::size_t cout_g = ys.c / g.groups;
  if (gw != nullptr) {
#pragma omp parallel for schedule(static)
    for (std::size_t o = 0; o < ys.c; ++o) {
      const std::size_t grp = o / cout_g;
      for (std::size_t ci = 0; ci < cin_g; ++ci) {
        const std::size_t c = grp * cin_g + ci;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            T acc = 0;
            for (std::size_t n = 0; n < xs.n; ++n)
              for (std::size_t oy = 0; oy < ys.h; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xs.h)) continue;
                for (std::size_t ox = 0; ox < ys.w; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(xs.w)) continue;
                  acc += gy.at(n, o, oy, ox) * x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                }
              }
            gw->at(o, ci, ky, kx) += acc;
          }
      }
    }
  }
  if (gx != nullptr) {
    // Gather form: each input element sums its contributions in a fixed order.
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t grp = c / cin_g;
        const std::size_t ci = c % cin_g;
        for (std::size_t iy = 0; iy < xs.h; ++iy)
          for (std::size_t ix = 0; ix < xs.w; ++ix) {
            T acc = 0;
            for (std::size_t oo = 0; oo < cout_g; ++oo) {
              const std::size_t o = grp * cout_g + oo;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(iy + g.padding) - static_cast<std::ptrdiff_t>(ky);
                if (ny < 0 || ny % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                const std::size_t oy = static_cast<std::size_t>(ny) / g.stride;
                if (oy >= ys.h) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t nx =
                      static_cast<std::ptrdiff_t>(ix + g.padding) - static_cast<std::ptrdiff_t>(kx);
                  if (nx < 0 || nx % static_cast<std::ptrdiff_t>(g.stride) != 0) continue;
                  const std::size_t ox = static_cast<std::size_t>(nx) / g.stride;
                  if (ox >= ys.w) continue;
                  acc += w.at(o, ci, ky, kx) * gy.at(n, o, oy, ox);
                }
              }
            }
            gx->at(n, c, iy, ix) += acc;
          }
      }
    }
  }
}

}  // namespace fortress::kernels
