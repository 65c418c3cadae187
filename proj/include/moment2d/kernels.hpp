#pragma once

#include <cstring>
#include <stdexcept>

#include "moment2d/tensor.hpp"

namespace m2d {

/// Output extent of a 1-axis convolution.
inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                    std::int64_t dilation, std::int64_t pad) {
  if (kernel < 1 || stride < 1 || dilation < 1 || pad < 0)
    throw std::invalid_argument("conv: kernel/stride/dilation must be >= 1, pad >= 0");
  const std::int64_t span = dilation * (kernel - 1) + 1;
  const std::int64_t num = in + 2 * pad - span;
  if (num < 0) throw std::invalid_argument("conv: output extent < 1");
  return num / stride + 1;
}

/// y = x W^T + b over the trailing axis; x is [rows, d_in] flattened.
inline Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* b) {
  const std::int64_t din = x.last_dim();
  const std::int64_t rows = x.rows_flat();
  if (w.rank() != 2 || w.dim(1) != din)
    throw std::invalid_argument("linear: weight shape " + w.shape_str() + " does not accept input " +
                                x.shape_str());
  const std::int64_t dout = w.dim(0);
  if (b && b->size() != dout) throw std::invalid_argument("linear: bias size mismatch");
  std::vector<std::int64_t> yshape(x.shape());
  yshape.back() = dout;
  Tensor y(std::move(yshape));
  const double* xp = x.data();
  double* yp = y.data();
  for (std::int64_t r = 0; r < rows; ++r, xp += din, yp += dout) {
    if (b) std::memcpy(yp, b->data(), sizeof(double) * static_cast<std::size_t>(dout));
    for (std::int64_t i = 0; i < din; ++i) {
      const double xv = xp[i];
      if (xv == 0.0) continue;
      const double* wrow = w.data() + i;  // column i of W, stride din
      for (std::int64_t o = 0; o < dout; ++o) yp[o] += xv * wrow[o * din];
    }
  }
  return y;
}

/// Accumulates linear gradients. Any of dx/dw/db may be null.
inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx,
                            Tensor* dw, Tensor* db) {
  const std::int64_t din = x.last_dim();
  const std::int64_t dout = w.dim(0);
  const std::int64_t rows = x.rows_flat();
  const double* xp = x.data();
  const double* gp = dy.data();
  for (std::int64_t r = 0; r < rows; ++r, xp += din, gp += dout) {
    if (db) {
      double* dbp = db->data();
      for (std::int64_t o = 0; o < dout; ++o) dbp[o] += gp[o];
    }
    if (dx) {
      double* dxp = dx->data() + r * din;
      for (std::int64_t o = 0; o < dout; ++o) {
        const double g = gp[o];
        if (g == 0.0) continue;
        const double* wrow = w.data() + o * din;
        for (std::int64_t i = 0; i < din; ++i) dxp[i] += g * wrow[i];
      }
    }
    if (dw) {
      for (std::int64_t o = 0; o < dout; ++o) {
        const double g = gp[o];
        if (g == 0.0) continue;
        double* dwrow = dw->data() + o * din;
        for (std::int64_t i = 0; i < din; ++i) dwrow[i] += g * xp[i];
      }
    }
  }
}

/// 1D cross-correlation over the leading axis. x is [L, cin], w is
/// [kernel, cin, cout], output [Lout, cout]. Zero padding on both ends.
inline Tensor conv1d_forward(const Tensor& x, const Tensor& w, const Tensor* b, std::int64_t stride,
                             std::int64_t dilation, std::int64_t pad) {
  if (x.rank() != 2 || w.rank() != 3) throw std::invalid_argument("conv1d: bad ranks");
  const std::int64_t len = x.dim(0), cin = x.dim(1);
  const std::int64_t k = w.dim(0), cout = w.dim(2);
  if (w.dim(1) != cin) throw std::invalid_argument("conv1d: channel mismatch");
  const std::int64_t lout = conv_out_extent(len, k, stride, dilation, pad);
  Tensor y({lout, cout});
  for (std::int64_t o = 0; o < lout; ++o) {
    double* yrow = y.data() + o * cout;
    if (b)
      std::memcpy(yrow, b->data(), sizeof(double) * static_cast<std::size_t>(cout));
    for (std::int64_t t = 0; t < k; ++t) {
      const std::int64_t i = o * stride - pad + t * dilation;
      if (i < 0 || i >= len) continue;
      const double* xrow = x.data() + i * cin;
      const double* wtap = w.data() + t * cin * cout;
      for (std::int64_t c = 0; c < cin; ++c) {
        const double xv = xrow[c];
        const double* wrow = wtap + c * cout;
        for (std::int64_t q = 0; q < cout; ++q) yrow[q] += xv * wrow[q];
      }
    }
  }
  return y;
}

inline void conv1d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, std::int64_t stride,
                            std::int64_t dilation, std::int64_t pad, Tensor* dx, Tensor* dw,
                            Tensor* db) {
  const std::int64_t len = x.dim(0), cin = x.dim(1);
  const std::int64_t k = w.dim(0), cout = w.dim(2);
  const std::int64_t lout = dy.dim(0);
  for (std::int64_t o = 0; o < lout; ++o) {
    const double* grow = dy.data() + o * cout;
    if (db) {
      double* dbp = db->data();
      for (std::int64_t q = 0; q < cout; ++q) dbp[q] += grow[q];
    }
    for (std::int64_t t = 0; t < k; ++t) {
      const std::int64_t i = o * stride - pad + t * dilation;
      if (i < 0 || i >= len) continue;
      const double* xrow = x.data() + i * cin;
      for (std::int64_t c = 0; c < cin; ++c) {
        const double* wrow = w.data() + (t * cin + c) * cout;
        if (dx) {
          double acc = 0.0;
          for (std::int64_t q = 0; q < cout; ++q) acc += grow[q] * wrow[q];
          dx->data()[i * cin + c] += acc;
        }
        if (dw) {
          const double xv = xrow[c];
          double* dwrow = dw->data() + (t * cin + c) * cout;
          for (std::int64_t q = 0; q < cout; ++q) dwrow[q] += xv * grow[q];
        }
      }
    }
  }
}

namespace detail {

// Output positions processed per inner pass. Amortizes one weight-row stream
// across kConvBlock accumulator rows, which keeps the stride-1 kernels
// compute-bound instead of L2-bandwidth-bound.
constexpr std::int64_t kConvBlock = 8;

/// Stride-1 dilation-1 forward with compile-time channel width V = cout.
template <int V>
void conv2d_fw_s1(const Tensor& x, const Tensor& w, const double* bias, std::int64_t pad_h,
                  std::int64_t pad_w, Tensor& y) {
  const std::int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::int64_t kh = w.dim(0), kw = w.dim(1);
  const std::int64_t ho = y.dim(0), wo = y.dim(1);
  constexpr std::int64_t PB = kConvBlock;
  alignas(64) double acc[PB][V];
  for (std::int64_t oh = 0; oh < ho; ++oh) {
    const std::int64_t ih0 = oh - pad_h;
    for (std::int64_t ow0 = 0; ow0 < wo; ow0 += PB) {
      const std::int64_t chunk = std::min(PB, wo - ow0);
      for (std::int64_t p = 0; p < chunk; ++p)
        for (int q = 0; q < V; ++q) acc[p][q] = bias ? bias[q] : 0.0;
      for (std::int64_t th = 0; th < kh; ++th) {
        const std::int64_t ih = ih0 + th;
        if (ih < 0 || ih >= h) continue;
        for (std::int64_t tw = 0; tw < kw; ++tw) {
          const double* xrow[PB];
          bool any = false;
          for (std::int64_t p = 0; p < PB; ++p) {
            const std::int64_t iw = ow0 + p - pad_w + tw;
            const bool ok = p < chunk && iw >= 0 && iw < wd;
            xrow[p] = ok ? x.data() + (ih * wd + iw) * cin : nullptr;
            any = any || ok;
          }
          if (!any) continue;
          const double* wtap = w.data() + (th * kw + tw) * cin * V;
          for (std::int64_t c = 0; c < cin; ++c) {
            const double* __restrict wr = wtap + c * V;
            for (std::int64_t p = 0; p < PB; ++p) {
              if (!xrow[p]) continue;
              const double v = xrow[p][c];
              if (v == 0.0) continue;  // masked cells are exact zeros
              double* __restrict a = acc[p];
              for (int q = 0; q < V; ++q) a[q] += v * wr[q];
            }
          }
        }
      }
      for (std::int64_t p = 0; p < chunk; ++p)
        std::memcpy(y.data() + (oh * wo + ow0 + p) * V, acc[p], sizeof(double) * V);
    }
  }
}

/// Stride-1 dilation-1 input gradient with V = cin, driven by per-tap
/// transposed weights wt [kh, kw, cout, cin]. Same inner shape as the
/// forward kernel with input and output roles swapped.
template <int V>
void conv2d_dx_s1(const Tensor& wt, const Tensor& dy, std::int64_t pad_h, std::int64_t pad_w,
                  Tensor& dx) {
  const std::int64_t h = dx.dim(0), wd = dx.dim(1);
  const std::int64_t kh = wt.dim(0), kw = wt.dim(1), cout = wt.dim(2);
  const std::int64_t ho = dy.dim(0), wo = dy.dim(1);
  constexpr std::int64_t PB = kConvBlock;
  alignas(64) double acc[PB][V];
  for (std::int64_t ih = 0; ih < h; ++ih) {
    for (std::int64_t iw0 = 0; iw0 < wd; iw0 += PB) {
      const std::int64_t chunk = std::min(PB, wd - iw0);
      for (std::int64_t p = 0; p < chunk; ++p)
        for (int q = 0; q < V; ++q) acc[p][q] = 0.0;
      for (std::int64_t th = 0; th < kh; ++th) {
        const std::int64_t oh = ih + pad_h - th;
        if (oh < 0 || oh >= ho) continue;
        for (std::int64_t tw = 0; tw < kw; ++tw) {
          const double* grow[PB];
          bool any = false;
          for (std::int64_t p = 0; p < PB; ++p) {
            const std::int64_t ow = iw0 + p + pad_w - tw;
            const bool ok = p < chunk && ow >= 0 && ow < wo;
            grow[p] = ok ? dy.data() + (oh * wo + ow) * cout : nullptr;
            any = any || ok;
          }
          if (!any) continue;
          const double* wtap = wt.data() + (th * kw + tw) * cout * V;
          for (std::int64_t q = 0; q < cout; ++q) {
            const double* __restrict wr = wtap + q * V;
            for (std::int64_t p = 0; p < PB; ++p) {
              if (!grow[p]) continue;
              const double g = grow[p][q];
              double* __restrict a = acc[p];
              for (int c = 0; c < V; ++c) a[c] += g * wr[c];
            }
          }
        }
      }
      for (std::int64_t p = 0; p < chunk; ++p) {
        double* out = dx.data() + (ih * wd + iw0 + p) * V;
        for (int c = 0; c < V; ++c) out[c] += acc[p][c];
      }
    }
  }
}

/// Stride-1 dilation-1 weight gradient with V = cout. Accumulates each
/// (tap, cin-block) into an L1-resident tile over the whole map before
/// flushing it once.
template <int V>
void conv2d_dw_s1(const Tensor& x, const Tensor& dy, std::int64_t pad_h, std::int64_t pad_w,
                  Tensor& dw) {
  const std::int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::int64_t kh = dw.dim(0), kw = dw.dim(1);
  const std::int64_t ho = dy.dim(0), wo = dy.dim(1);
  constexpr std::int64_t CB = 8;
  alignas(64) double tile[CB][V];
  for (std::int64_t th = 0; th < kh; ++th) {
    for (std::int64_t tw = 0; tw < kw; ++tw) {
      for (std::int64_t cb = 0; cb < cin; cb += CB) {
        const std::int64_t cbn = std::min(CB, cin - cb);
        for (std::int64_t c = 0; c < cbn; ++c)
          for (int q = 0; q < V; ++q) tile[c][q] = 0.0;
        for (std::int64_t oh = 0; oh < ho; ++oh) {
          const std::int64_t ih = oh - pad_h + th;
          if (ih < 0 || ih >= h) continue;
          const std::int64_t ow_lo = std::max<std::int64_t>(0, pad_w - tw);
          const std::int64_t ow_hi = std::min(wo, wd + pad_w - tw);
          for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) {
            const std::int64_t iw = ow - pad_w + tw;
            const double* __restrict xr = x.data() + (ih * wd + iw) * cin + cb;
            const double* __restrict g = dy.data() + (oh * wo + ow) * V;
            for (std::int64_t c = 0; c < cbn; ++c) {
              const double v = xr[c];
              if (v == 0.0) continue;
              double* __restrict t = tile[c];
              for (int q = 0; q < V; ++q) t[q] += v * g[q];
            }
          }
        }
        for (std::int64_t c = 0; c < cbn; ++c) {
          double* __restrict out = dw.data() + ((th * kw + tw) * cin + cb + c) * V;
          for (int q = 0; q < V; ++q) out[q] += tile[c][q];
        }
      }
    }
  }
}

inline constexpr bool conv_fast_width(std::int64_t v) {
  return v == 8 || v == 16 || v == 32 || v == 64 || v == 128;
}

template <typename F>
void conv_dispatch_width(std::int64_t v, F&& f) {
  switch (v) {
    case 8: f(std::integral_constant<int, 8>{}); break;
    case 16: f(std::integral_constant<int, 16>{}); break;
    case 32: f(std::integral_constant<int, 32>{}); break;
    case 64: f(std::integral_constant<int, 64>{}); break;
    case 128: f(std::integral_constant<int, 128>{}); break;
    default: throw std::logic_error("conv_dispatch_width: unsupported width");
  }
}

}  // namespace detail

/// 2D cross-correlation, channels-last. x is [H, W, cin], w is
/// [kh, kw, cin, cout], output [Ho, Wo, cout]. Symmetric zero padding.
inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, std::int64_t stride,
                             std::int64_t dilation, std::int64_t pad_h, std::int64_t pad_w) {
  if (x.rank() != 3 || w.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
  const std::int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::int64_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (w.dim(2) != cin) throw std::invalid_argument("conv2d: channel mismatch");
  const std::int64_t ho = conv_out_extent(h, kh, stride, dilation, pad_h);
  const std::int64_t wo = conv_out_extent(wd, kw, stride, dilation, pad_w);
  Tensor y({ho, wo, cout});

  if (stride == 1 && dilation == 1 && detail::conv_fast_width(cout)) {
    detail::conv_dispatch_width(cout, [&](auto vc) {
      detail::conv2d_fw_s1<decltype(vc)::value>(x, w, b ? b->data() : nullptr, pad_h, pad_w, y);
    });
    return y;
  }

  for (std::int64_t oh = 0; oh < ho; ++oh) {
    for (std::int64_t ow = 0; ow < wo; ++ow) {
      double* yrow = y.data() + (oh * wo + ow) * cout;
      if (b) std::memcpy(yrow, b->data(), sizeof(double) * static_cast<std::size_t>(cout));
      const std::int64_t ih0 = oh * stride - pad_h;
      const std::int64_t iw0 = ow * stride - pad_w;
      for (std::int64_t th = 0; th < kh; ++th) {
        const std::int64_t ih = ih0 + th * dilation;
        if (ih < 0 || ih >= h) continue;
        for (std::int64_t tw = 0; tw < kw; ++tw) {
          const std::int64_t iw = iw0 + tw * dilation;
          if (iw < 0 || iw >= wd) continue;
          const double* xrow = x.data() + (ih * wd + iw) * cin;
          const double* wtap = w.data() + (th * kw + tw) * cin * cout;
          for (std::int64_t c = 0; c < cin; ++c) {
            const double xv = xrow[c];
            if (xv == 0.0) continue;
            const double* wrow = wtap + c * cout;
            for (std::int64_t q = 0; q < cout; ++q) yrow[q] += xv * wrow[q];
          }
        }
      }
    }
  }
  return y;
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, std::int64_t stride,
                            std::int64_t dilation, std::int64_t pad_h, std::int64_t pad_w,
                            Tensor* dx, Tensor* dw, Tensor* db) {
  const std::int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::int64_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const std::int64_t ho = dy.dim(0), wo = dy.dim(1);

  if (db) {
    double* dbp = db->data();
    for (std::int64_t o = 0; o < ho * wo; ++o) {
      const double* grow = dy.data() + o * cout;
      for (std::int64_t q = 0; q < cout; ++q) dbp[q] += grow[q];
    }
  }
  if (!dx && !dw) return;

  const bool fast = stride == 1 && dilation == 1;
  if (fast && dw && detail::conv_fast_width(cout)) {
    detail::conv_dispatch_width(cout, [&](auto vc) {
      detail::conv2d_dw_s1<decltype(vc)::value>(x, dy, pad_h, pad_w, *dw);
    });
    dw = nullptr;
  }
  if (fast && dx && detail::conv_fast_width(cin)) {
    Tensor wt({kh, kw, cout, cin});
    for (std::int64_t t = 0; t < kh * kw; ++t)
      for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t q = 0; q < cout; ++q)
          wt[(t * cout + q) * cin + c] = w[(t * cin + c) * cout + q];
    detail::conv_dispatch_width(cin, [&](auto vc) {
      detail::conv2d_dx_s1<decltype(vc)::value>(wt, dy, pad_h, pad_w, *dx);
    });
    dx = nullptr;
  }
  if (!dx && !dw) return;

  for (std::int64_t oh = 0; oh < ho; ++oh) {
    for (std::int64_t ow = 0; ow < wo; ++ow) {
      const double* grow = dy.data() + (oh * wo + ow) * cout;
      const std::int64_t ih0 = oh * stride - pad_h;
      const std::int64_t iw0 = ow * stride - pad_w;
      for (std::int64_t th = 0; th < kh; ++th) {
        const std::int64_t ih = ih0 + th * dilation;
        if (ih < 0 || ih >= h) continue;
        for (std::int64_t tw = 0; tw < kw; ++tw) {
          const std::int64_t iw = iw0 + tw * dilation;
          if (iw < 0 || iw >= wd) continue;
          const double* xrow = x.data() + (ih * wd + iw) * cin;
          const std::int64_t tap = (th * kw + tw) * cin * cout;
          for (std::int64_t c = 0; c < cin; ++c) {
            const double* wrow = w.data() + tap + c * cout;
            if (dx) {
              double acc = 0.0;
              for (std::int64_t q = 0; q < cout; ++q) acc += grow[q] * wrow[q];
              dx->data()[(ih * wd + iw) * cin + c] += acc;
            }
            if (dw) {
              const double xv = xrow[c];
              if (xv != 0.0) {
                double* dwrow = dw->data() + tap + c * cout;
                for (std::int64_t q = 0; q < cout; ++q) dwrow[q] += xv * grow[q];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace m2d
