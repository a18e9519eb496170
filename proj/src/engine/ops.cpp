#include "clickrefine/engine/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "clickrefine/kernels/kernels.hpp"

namespace clickrefine::ops {
namespace {

template <typename T>
BasicArray<T>& ensure_shape(BasicArray<T>& grad, const Shape& shape) {
  if (grad.shape() != shape) grad = BasicArray<T>(shape);
  return grad;
}

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(shape));
  }
}

// Unfolds one image [C, H, W] into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + out_w, T{0});
            continue;
          }
          const T* src = image + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* image) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = image + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const BasicArray<T>& input, const BasicArray<T>& kernel, const Conv2dSpec& spec) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  if (spec.stride == 0 || spec.groups == 0) throw ConfigError("conv2d: stride and groups must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), 0, 0};
  if (g.c % spec.groups != 0 || g.o % spec.groups != 0 || kernel.dim(1) != g.c / spec.groups) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel.shape()) + " incompatible with input " +
                         shape_to_string(input.shape()) + " and groups " + std::to_string(spec.groups));
  }
  if (g.kh > g.h + 2 * spec.padding || g.kw > g.w + 2 * spec.padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.out_h = conv_output_size(g.h, g.kh, spec.stride, spec.padding);
  g.out_w = conv_output_size(g.w, g.kw, spec.stride, spec.padding);
  return g;
}

template <typename T>
void add_channel_bias(BasicArray<T>& out, const BasicArray<T>& bias) {
  const std::size_t n = out.dim(0), c = out.dim(1), plane = out.dim(2) * out.dim(3);
  require_shape(bias, Shape{c}, "bias");
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = out.data() + (b * c + ch) * plane;
      const T v = bias[ch];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
  }
}

template <typename T>
void accumulate_channel_bias_grad(const BasicArray<T>& dy, BasicArray<T>& dbias) {
  const std::size_t n = dy.dim(0), c = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
  ensure_shape(dbias, Shape{c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = dy.data() + (b * c + ch) * plane;
      T acc{0};
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      dbias[ch] += acc;
    }
  }
}

// Bilinear sample with zero outside the image; also reports corner data for
// the backward pass.
template <typename T>
struct BilinearTap {
  std::ptrdiff_t y0, x0;
  T ly, lx;
};

template <typename T>
inline BilinearTap<T> make_tap(T py, T px) {
  const T fy = std::floor(py), fx = std::floor(px);
  return {static_cast<std::ptrdiff_t>(fy), static_cast<std::ptrdiff_t>(fx), py - fy, px - fx};
}

template <typename T>
inline T read_or_zero(const T* plane, std::size_t h, std::size_t w, std::ptrdiff_t y, std::ptrdiff_t x) {
  if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return T{0};
  return plane[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
}

template <typename T>
inline T bilinear(const T* plane, std::size_t h, std::size_t w, const BilinearTap<T>& t) {
  const T v00 = read_or_zero(plane, h, w, t.y0, t.x0);
  const T v01 = read_or_zero(plane, h, w, t.y0, t.x0 + 1);
  const T v10 = read_or_zero(plane, h, w, t.y0 + 1, t.x0);
  const T v11 = read_or_zero(plane, h, w, t.y0 + 1, t.x0 + 1);
  return (T{1} - t.ly) * (T{1} - t.lx) * v00 + (T{1} - t.ly) * t.lx * v01 + t.ly * (T{1} - t.lx) * v10 +
         t.ly * t.lx * v11;
}

template <typename T>
void deformable_columns(const T* image, const T* offsets, const ConvGeometry& g, const Conv2dSpec& spec,
                        T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t taps = g.kh * g.kw;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* src = image + c * g.h * g.w;
    for (std::size_t t = 0; t < taps; ++t) {
      const std::size_t ky = t / g.kw, kx = t % g.kw;
      const T* off_x = offsets + (2 * t) * plane;
      const T* off_y = offsets + (2 * t + 1) * plane;
      T* row = cols + (c * taps + t) * plane;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const std::size_t pos = oy * g.out_w + ox;
          const T base_y = static_cast<T>(static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                          static_cast<std::ptrdiff_t>(spec.padding));
          const T base_x = static_cast<T>(static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                          static_cast<std::ptrdiff_t>(spec.padding));
          row[pos] = bilinear(src, g.h, g.w, make_tap(base_y + off_y[pos], base_x + off_x[pos]));
        }
      }
    }
  }
}

template <typename T>
inline T gelu_scalar(T x) {
  return T{0.5} * x * (T{1} + std::erf(x * static_cast<T>(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad_scalar(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(0.70710678118654752440)));
  const T pdf = static_cast<T>(0.39894228040143267794) * std::exp(T{-0.5} * x * x);
  return cdf + x * pdf;
}

struct AxisSplit {
  std::size_t outer, dim, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("layer_norm: axis out of range for " + shape_to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct ResizeTable {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

ResizeTable resize_table(std::size_t in, std::size_t out) {
  ResizeTable t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> linear(const BasicArray<T>& x, const BasicArray<T>& w, const BasicArray<T>* bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " vs weight " + shape_to_string(w.shape()));
  }
  const std::size_t l = x.dim(0), din = x.dim(1), dout = w.dim(1);
  BasicArray<T> y(Shape{l, dout});
  kernels::gemm<T>(false, false, l, dout, din, x.data(), din, w.data(), dout, y.data(), dout, false);
  if (bias) {
    require_shape(*bias, Shape{dout}, "linear bias");
    for (std::size_t i = 0; i < l; ++i) kernels::axpy<T>(dout, T{1}, bias->data(), y.data() + i * dout);
  }
  return y;
}

template <typename T>
void linear_backward(const BasicArray<T>& x, const BasicArray<T>& w, const BasicArray<T>& dy, BasicArray<T>* dx,
                     BasicArray<T>* dw, BasicArray<T>* dbias) {
  const std::size_t l = x.dim(0), din = x.dim(1), dout = w.dim(1);
  if (dx) {
    ensure_shape(*dx, x.shape());
    kernels::gemm<T>(false, true, l, din, dout, dy.data(), dout, w.data(), dout, dx->data(), din, true);
  }
  if (dw) {
    ensure_shape(*dw, w.shape());
    kernels::gemm<T>(true, false, din, dout, l, x.data(), din, dy.data(), dout, dw->data(), dout, true);
  }
  if (dbias) {
    ensure_shape(*dbias, Shape{dout});
    for (std::size_t i = 0; i < l; ++i) kernels::axpy<T>(dout, T{1}, dy.data() + i * dout, dbias->data());
  }
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel, const BasicArray<T>* bias,
                     Conv2dSpec spec) {
  const ConvGeometry g = conv_geometry(input, kernel, spec);
  const std::size_t cg = g.c / spec.groups, og = g.o / spec.groups;
  const std::size_t kk = g.kh * g.kw, plane = g.out_h * g.out_w;
  BasicArray<T> out(Shape{g.n, g.o, g.out_h, g.out_w});
  std::vector<T> cols(cg * kk * plane);
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t grp = 0; grp < spec.groups; ++grp) {
      const T* image = input.data() + (b * g.c + grp * cg) * g.h * g.w;
      im2col(image, cg, g.h, g.w, g.kh, g.kw, spec.stride, spec.padding, g.out_h, g.out_w, cols.data());
      kernels::gemm<T>(false, false, og, plane, cg * kk, kernel.data() + grp * og * cg * kk, cg * kk, cols.data(),
                       plane, out.data() + (b * g.o + grp * og) * plane, plane, false);
    }
  }
  if (bias) add_channel_bias(out, *bias);
  return out;
}

template <typename T>
void conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel, const BasicArray<T>& dy,
                     Conv2dSpec spec, BasicArray<T>* dinput, BasicArray<T>* dkernel, BasicArray<T>* dbias) {
  const ConvGeometry g = conv_geometry(input, kernel, spec);
  require_shape(dy, Shape{g.n, g.o, g.out_h, g.out_w}, "conv2d grad");
  const std::size_t cg = g.c / spec.groups, og = g.o / spec.groups;
  const std::size_t kk = g.kh * g.kw, plane = g.out_h * g.out_w;
  std::vector<T> cols(cg * kk * plane);
  if (dinput) ensure_shape(*dinput, input.shape());
  if (dkernel) ensure_shape(*dkernel, kernel.shape());
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t grp = 0; grp < spec.groups; ++grp) {
      const T* grad_out = dy.data() + (b * g.o + grp * og) * plane;
      const T* kmat = kernel.data() + grp * og * cg * kk;
      if (dkernel) {
        const T* image = input.data() + (b * g.c + grp * cg) * g.h * g.w;
        im2col(image, cg, g.h, g.w, g.kh, g.kw, spec.stride, spec.padding, g.out_h, g.out_w, cols.data());
        kernels::gemm<T>(false, true, og, cg * kk, plane, grad_out, plane, cols.data(), plane,
                         dkernel->data() + grp * og * cg * kk, cg * kk, true);
      }
      if (dinput) {
        kernels::gemm<T>(true, false, cg * kk, plane, og, kmat, cg * kk, grad_out, plane, cols.data(), plane, false);
        col2im(cols.data(), cg, g.h, g.w, g.kh, g.kw, spec.stride, spec.padding, g.out_h, g.out_w,
               dinput->data() + (b * g.c + grp * cg) * g.h * g.w);
      }
    }
  }
  if (dbias) accumulate_channel_bias_grad(dy, *dbias);
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> deformable_conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel,
                                const BasicArray<T>& offsets, const BasicArray<T>* bias, Conv2dSpec spec) {
  if (spec.groups != 1) throw ConfigError("deformable_conv2d: grouped kernels are not supported");
  const ConvGeometry g = conv_geometry(input, kernel, spec);
  const std::size_t kk = g.kh * g.kw, plane = g.out_h * g.out_w;
  if (offsets.shape() != Shape{g.n, 2 * kk, g.out_h, g.out_w}) {
    throw DimensionError("deformable_conv2d: offsets must be " +
                         shape_to_string(Shape{g.n, 2 * kk, g.out_h, g.out_w}) + ", got " +
                         shape_to_string(offsets.shape()));
  }
  BasicArray<T> out(Shape{g.n, g.o, g.out_h, g.out_w});
  std::vector<T> cols(g.c * kk * plane);
  for (std::size_t b = 0; b < g.n; ++b) {
    deformable_columns(input.data() + b * g.c * g.h * g.w, offsets.data() + b * 2 * kk * plane, g, spec,
                       cols.data());
    kernels::gemm<T>(false, false, g.o, plane, g.c * kk, kernel.data(), g.c * kk, cols.data(), plane,
                     out.data() + b * g.o * plane, plane, false);
  }
  if (bias) add_channel_bias(out, *bias);
  return out;
}

template <typename T>
void deformable_conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel,
                                const BasicArray<T>& offsets, const BasicArray<T>& dy, Conv2dSpec spec,
                                BasicArray<T>* dinput, BasicArray<T>* dkernel, BasicArray<T>* doffsets,
                                BasicArray<T>* dbias) {
  const ConvGeometry g = conv_geometry(input, kernel, spec);
  const std::size_t kk = g.kh * g.kw, plane = g.out_h * g.out_w;
  require_shape(dy, Shape{g.n, g.o, g.out_h, g.out_w}, "deformable_conv2d grad");
  std::vector<T> cols(g.c * kk * plane);
  std::vector<T> dcols(g.c * kk * plane);
  if (dinput) ensure_shape(*dinput, input.shape());
  if (dkernel) ensure_shape(*dkernel, kernel.shape());
  if (doffsets) ensure_shape(*doffsets, offsets.shape());
  for (std::size_t b = 0; b < g.n; ++b) {
    const T* image = input.data() + b * g.c * g.h * g.w;
    const T* off = offsets.data() + b * 2 * kk * plane;
    const T* grad_out = dy.data() + b * g.o * plane;
    if (dkernel) {
      deformable_columns(image, off, g, spec, cols.data());
      kernels::gemm<T>(false, true, g.o, g.c * kk, plane, grad_out, plane, cols.data(), plane, dkernel->data(),
                       g.c * kk, true);
    }
    if (!dinput && !doffsets) continue;
    kernels::gemm<T>(true, false, g.c * kk, plane, g.o, kernel.data(), g.c * kk, grad_out, plane, dcols.data(),
                     plane, false);
    T* gimage = dinput ? dinput->data() + b * g.c * g.h * g.w : nullptr;
    T* goff = doffsets ? doffsets->data() + b * 2 * kk * plane : nullptr;
    for (std::size_t c = 0; c < g.c; ++c) {
      const T* src = image + c * g.h * g.w;
      for (std::size_t t = 0; t < kk; ++t) {
        const std::size_t ky = t / g.kw, kx = t % g.kw;
        const T* off_x = off + (2 * t) * plane;
        const T* off_y = off + (2 * t + 1) * plane;
        const T* drow = dcols.data() + (c * kk + t) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::size_t pos = oy * g.out_w + ox;
            const T grad = drow[pos];
            const T base_y = static_cast<T>(static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                            static_cast<std::ptrdiff_t>(spec.padding));
            const T base_x = static_cast<T>(static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                            static_cast<std::ptrdiff_t>(spec.padding));
            const auto tap = make_tap(base_y + off_y[pos], base_x + off_x[pos]);
            if (gimage) {
              const T weights[4] = {(T{1} - tap.ly) * (T{1} - tap.lx), (T{1} - tap.ly) * tap.lx,
                                    tap.ly * (T{1} - tap.lx), tap.ly * tap.lx};
              const std::ptrdiff_t ys[4] = {tap.y0, tap.y0, tap.y0 + 1, tap.y0 + 1};
              const std::ptrdiff_t xs[4] = {tap.x0, tap.x0 + 1, tap.x0, tap.x0 + 1};
              for (int corner = 0; corner < 4; ++corner) {
                if (ys[corner] < 0 || xs[corner] < 0 || ys[corner] >= static_cast<std::ptrdiff_t>(g.h) ||
                    xs[corner] >= static_cast<std::ptrdiff_t>(g.w)) {
                  continue;
                }
                gimage[(c * g.h + static_cast<std::size_t>(ys[corner])) * g.w + static_cast<std::size_t>(xs[corner])] +=
                    grad * weights[corner];
              }
            }
            if (goff) {
              const T v00 = read_or_zero(src, g.h, g.w, tap.y0, tap.x0);
              const T v01 = read_or_zero(src, g.h, g.w, tap.y0, tap.x0 + 1);
              const T v10 = read_or_zero(src, g.h, g.w, tap.y0 + 1, tap.x0);
              const T v11 = read_or_zero(src, g.h, g.w, tap.y0 + 1, tap.x0 + 1);
              goff[(2 * t) * plane + pos] += grad * ((T{1} - tap.ly) * (v01 - v00) + tap.ly * (v11 - v10));
              goff[(2 * t + 1) * plane + pos] += grad * ((T{1} - tap.lx) * (v10 - v00) + tap.lx * (v11 - v01));
            }
          }
        }
      }
    }
  }
  if (dbias) accumulate_channel_bias_grad(dy, *dbias);
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> transposed_conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel, std::size_t stride,
                                const BasicArray<T>* bias) {
  require_rank(input.shape(), 4, "transposed_conv2d input");
  require_rank(kernel.shape(), 4, "transposed_conv2d kernel");
  if (stride == 0) throw ConfigError("transposed_conv2d: stride must be >= 1");
  if (kernel.dim(0) != input.dim(1)) {
    throw DimensionError("transposed_conv2d: kernel " + shape_to_string(kernel.shape()) + " vs input " +
                         shape_to_string(input.shape()));
  }
  const std::size_t n = input.dim(0), o = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t out_h = (h - 1) * stride + kh, out_w = (w - 1) * stride + kw;
  const std::size_t ckk = c * kh * kw, plane = h * w;
  BasicArray<T> out(Shape{n, c, out_h, out_w});
  std::vector<T> cols(ckk * plane);
  for (std::size_t b = 0; b < n; ++b) {
    kernels::gemm<T>(true, false, ckk, plane, o, kernel.data(), ckk, input.data() + b * o * plane, plane,
                     cols.data(), plane, false);
    col2im(cols.data(), c, out_h, out_w, kh, kw, stride, 0, h, w, out.data() + b * c * out_h * out_w);
  }
  if (bias) add_channel_bias(out, *bias);
  return out;
}

template <typename T>
void transposed_conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel, std::size_t stride,
                                const BasicArray<T>& dy, BasicArray<T>* dinput, BasicArray<T>* dkernel,
                                BasicArray<T>* dbias) {
  const std::size_t n = input.dim(0), o = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t out_h = (h - 1) * stride + kh, out_w = (w - 1) * stride + kw;
  const std::size_t ckk = c * kh * kw, plane = h * w;
  require_shape(dy, Shape{n, c, out_h, out_w}, "transposed_conv2d grad");
  std::vector<T> cols(ckk * plane);
  if (dinput) ensure_shape(*dinput, input.shape());
  if (dkernel) ensure_shape(*dkernel, kernel.shape());
  for (std::size_t b = 0; b < n; ++b) {
    im2col(dy.data() + b * c * out_h * out_w, c, out_h, out_w, kh, kw, stride, 0, h, w, cols.data());
    if (dinput) {
      kernels::gemm<T>(false, false, o, plane, ckk, kernel.data(), ckk, cols.data(), plane,
                       dinput->data() + b * o * plane, plane, true);
    }
    if (dkernel) {
      kernels::gemm<T>(false, true, o, ckk, plane, input.data() + b * o * plane, plane, cols.data(), plane,
                       dkernel->data(), ckk, true);
    }
  }
  if (dbias) accumulate_channel_bias_grad(dy, *dbias);
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> layer_norm(const BasicArray<T>& x, const BasicArray<T>& gain, const BasicArray<T>& shift,
                         std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  require_shape(gain, Shape{s.dim}, "layer_norm gain");
  require_shape(shift, Shape{s.dim}, "layer_norm shift");
  BasicArray<T> y(x.shape());
  const T eps = static_cast<T>(kNormEpsilon);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const T* px = x.data() + o * s.dim * s.inner + i;
      T* py = y.data() + o * s.dim * s.inner + i;
      T mean{0};
      for (std::size_t c = 0; c < s.dim; ++c) mean += px[c * s.inner];
      mean /= static_cast<T>(s.dim);
      T var{0};
      for (std::size_t c = 0; c < s.dim; ++c) {
        const T d = px[c * s.inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(s.dim);
      const T inv = T{1} / std::sqrt(var + eps);
      for (std::size_t c = 0; c < s.dim; ++c) py[c * s.inner] = (px[c * s.inner] - mean) * inv * gain[c] + shift[c];
    }
  }
  return y;
}

template <typename T>
void layer_norm_backward(const BasicArray<T>& x, const BasicArray<T>& gain, std::size_t axis,
                         const BasicArray<T>& dy, BasicArray<T>* dx, BasicArray<T>* dgain, BasicArray<T>* dshift) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const T eps = static_cast<T>(kNormEpsilon);
  if (dx) ensure_shape(*dx, x.shape());
  if (dgain) ensure_shape(*dgain, gain.shape());
  if (dshift) ensure_shape(*dshift, gain.shape());
  std::vector<T> xhat(s.dim), dxhat(s.dim);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.dim * s.inner + i;
      const T* px = x.data() + base;
      const T* pdy = dy.data() + base;
      T mean{0};
      for (std::size_t c = 0; c < s.dim; ++c) mean += px[c * s.inner];
      mean /= static_cast<T>(s.dim);
      T var{0};
      for (std::size_t c = 0; c < s.dim; ++c) {
        const T d = px[c * s.inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(s.dim);
      const T inv = T{1} / std::sqrt(var + eps);
      T mean_dxhat{0}, mean_dxhat_xhat{0};
      for (std::size_t c = 0; c < s.dim; ++c) {
        xhat[c] = (px[c * s.inner] - mean) * inv;
        dxhat[c] = pdy[c * s.inner] * gain[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xhat[c];
        if (dgain) (*dgain)[c] += pdy[c * s.inner] * xhat[c];
        if (dshift) (*dshift)[c] += pdy[c * s.inner];
      }
      mean_dxhat /= static_cast<T>(s.dim);
      mean_dxhat_xhat /= static_cast<T>(s.dim);
      if (dx) {
        T* pdx = dx->data() + base;
        for (std::size_t c = 0; c < s.dim; ++c) {
          pdx[c * s.inner] += inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
      }
    }
  }
}

template <typename T>
BasicArray<T> gelu(const BasicArray<T>& x) {
  BasicArray<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
void gelu_backward(const BasicArray<T>& x, const BasicArray<T>& dy, BasicArray<T>& dx) {
  ensure_shape(dx, x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_grad_scalar(x[i]);
}

template <typename T>
BasicArray<T> sigmoid(const BasicArray<T>& x) {
  BasicArray<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    if (v >= T{0}) {
      y[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T{1} + e);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> resize_bilinear(const BasicArray<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return x;
  const ResizeTable ty = resize_table(h, out_h), tx = resize_table(w, out_w);
  BasicArray<T> y(Shape{n, c, out_h, out_w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = y.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.lo[oy] * w;
      const T* r1 = src + ty.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = r0[tx.lo[ox]] * (T{1} - fx) + r0[tx.hi[ox]] * fx;
        const T bottom = r1[tx.lo[ox]] * (T{1} - fx) + r1[tx.hi[ox]] * fx;
        dst[oy * out_w + ox] = top * (T{1} - fy) + bottom * fy;
      }
    }
  }
  return y;
}

template <typename T>
void resize_bilinear_backward(const BasicArray<T>& dy, const Shape& input_shape, BasicArray<T>& dx) {
  ensure_shape(dx, input_shape);
  const std::size_t n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t out_h = dy.dim(2), out_w = dy.dim(3);
  if (out_h == h && out_w == w) {
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    return;
  }
  const ResizeTable ty = resize_table(h, out_h), tx = resize_table(w, out_w);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* g = dy.data() + p * out_h * out_w;
    T* dst = dx.data() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      T* r0 = dst + ty.lo[oy] * w;
      T* r1 = dst + ty.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T v = g[oy * out_w + ox];
        r0[tx.lo[ox]] += v * (T{1} - fy) * (T{1} - fx);
        r0[tx.hi[ox]] += v * (T{1} - fy) * fx;
        r1[tx.lo[ox]] += v * fy * (T{1} - fx);
        r1[tx.hi[ox]] += v * fy * fx;
      }
    }
  }
}

template <typename T>
BasicArray<T> avg_pool2d(const BasicArray<T>& x, std::size_t k) {
  require_rank(x.shape(), 4, "avg_pool2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw DimensionError("avg_pool2d: " + shape_to_string(x.shape()) + " not divisible by " + std::to_string(k));
  }
  if (k == 1) return x;
  const std::size_t oh = h / k, ow = w / k;
  BasicArray<T> y(Shape{n, c, oh, ow});
  const T scale = T{1} / static_cast<T>(k * k);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = y.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
        }
        dst[oy * ow + ox] = acc * scale;
      }
    }
  }
  return y;
}

template <typename T>
void avg_pool2d_backward(const BasicArray<T>& dy, std::size_t k, BasicArray<T>& dx) {
  const std::size_t n = dy.dim(0), c = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const std::size_t h = oh * k, w = ow * k;
  ensure_shape(dx, Shape{n, c, h, w});
  const T scale = T{1} / static_cast<T>(k * k);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* g = dy.data() + p * oh * ow;
    T* dst = dx.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) dst[y * w + x] += g[(y / k) * ow + x / k] * scale;
    }
  }
}

template <typename T>
BasicArray<T> global_avg_pool(const BasicArray<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicArray<T> y(Shape{n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    const T* src = x.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    y[p] = acc / static_cast<T>(plane);
  }
  return y;
}

template <typename T>
BasicArray<T> scale_channels(const BasicArray<T>& x, const BasicArray<T>& s) {
  require_rank(x.shape(), 4, "scale_channels input");
  require_shape(s, Shape{x.dim(0), x.dim(1)}, "scale_channels scale");
  const std::size_t plane = x.dim(2) * x.dim(3);
  BasicArray<T> y(x.shape());
  for (std::size_t p = 0; p < s.size(); ++p) {
    const T* src = x.data() + p * plane;
    T* dst = y.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * s[p];
  }
  return y;
}

template <typename T>
BasicArray<T> map_to_tokens(const BasicArray<T>& x) {
  require_rank(x.shape(), 4, "map_to_tokens input");
  if (x.dim(0) != 1) throw DimensionError("map_to_tokens: batch must be 1");
  const std::size_t c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicArray<T> t(Shape{plane, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) t[i * c + ch] = x[ch * plane + i];
  }
  return t;
}

template <typename T>
BasicArray<T> tokens_to_map(const BasicArray<T>& tokens, std::size_t h, std::size_t w) {
  require_rank(tokens.shape(), 2, "tokens_to_map input");
  if (tokens.dim(0) != h * w) {
    throw DimensionError("tokens_to_map: " + std::to_string(tokens.dim(0)) + " tokens for a " + std::to_string(h) +
                         "x" + std::to_string(w) + " grid");
  }
  const std::size_t c = tokens.dim(1), plane = h * w;
  BasicArray<T> x(Shape{1, c, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) x[ch * plane + i] = tokens[i * c + ch];
  }
  return x;
}

template <typename T>
BasicArray<T> concat_axis1(const BasicArray<T>& a, const BasicArray<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  std::size_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw DimensionError("concat: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    }
    inner *= a.dim(i);
  }
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  BasicArray<T> out(shape);
  const std::size_t na = a.dim(1) * inner, nb = b.dim(1) * inner;
  for (std::size_t o = 0; o < a.dim(0); ++o) {
    std::copy_n(a.data() + o * na, na, out.data() + o * (na + nb));
    std::copy_n(b.data() + o * nb, nb, out.data() + o * (na + nb) + na);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicArray<T> attention_core(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                             std::size_t heads, BasicArray<T>* probs) {
  require_rank(q.shape(), 2, "attention query");
  require_rank(k.shape(), 2, "attention key");
  if (k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
                         ", v " + shape_to_string(v.shape()));
  }
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  BasicArray<T> out(Shape{lq, d});
  BasicArray<T> local;
  BasicArray<T>& p = probs ? *probs : local;
  p = BasicArray<T>(Shape{heads, lq, lk});
  for (std::size_t h = 0; h < heads; ++h) {
    T* ph = p.data() + h * lq * lk;
    kernels::gemm<T>(false, true, lq, lk, dh, q.data() + h * dh, d, k.data() + h * dh, d, ph, lk, false);
    for (std::size_t i = 0; i < lq; ++i) {
      T* row = ph + i * lk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] *= scale;
        mx = std::max(mx, row[j]);
      }
      T total{0};
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::size_t j = 0; j < lk; ++j) row[j] /= total;
    }
    kernels::gemm<T>(false, false, lq, dh, lk, ph, lk, v.data() + h * dh, d, out.data() + h * dh, d, false);
  }
  return out;
}

template <typename T>
void attention_core_backward(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                             std::size_t heads, const BasicArray<T>& probs, const BasicArray<T>& dy,
                             BasicArray<T>* dq, BasicArray<T>* dk, BasicArray<T>* dv) {
  const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1), dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  if (dq) ensure_shape(*dq, q.shape());
  if (dk) ensure_shape(*dk, k.shape());
  if (dv) ensure_shape(*dv, v.shape());
  std::vector<T> dp(lq * lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* ph = probs.data() + h * lq * lk;
    const T* gout = dy.data() + h * dh;
    if (dv) kernels::gemm<T>(true, false, lk, dh, lq, ph, lk, gout, d, dv->data() + h * dh, d, true);
    if (!dq && !dk) continue;
    kernels::gemm<T>(false, true, lq, lk, dh, gout, d, v.data() + h * dh, d, dp.data(), lk, false);
    for (std::size_t i = 0; i < lq; ++i) {
      T* drow = dp.data() + i * lk;
      const T* prow = ph + i * lk;
      T inner{0};
      for (std::size_t j = 0; j < lk; ++j) inner += drow[j] * prow[j];
      for (std::size_t j = 0; j < lk; ++j) drow[j] = prow[j] * (drow[j] - inner) * scale;
    }
    if (dq) kernels::gemm<T>(false, false, lq, dh, lk, dp.data(), lk, k.data() + h * dh, d, dq->data() + h * dh, d, true);
    if (dk) kernels::gemm<T>(true, false, lk, dh, lq, dp.data(), lk, q.data() + h * dh, d, dk->data() + h * dh, d, true);
  }
}

template <typename T>
BasicArray<T> multi_head_attention(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                                   std::size_t heads, const AttentionWeights<T>& weights, BasicArray<T>* probs) {
  const BasicArray<T> qp = linear(q, weights.wq, &weights.bq);
  const BasicArray<T> kp = linear(k, weights.wk, &weights.bk);
  const BasicArray<T> vp = linear(v, weights.wv, &weights.bv);
  const BasicArray<T> mixed = attention_core(qp, kp, vp, heads, probs);
  return linear(mixed, weights.wo, &weights.bo);
}

#define CLICKREFINE_INSTANTIATE_OPS(T)                                                                              \
  template BasicArray<T> linear(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>*);                  \
  template void linear_backward(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&, BasicArray<T>*,  \
                                BasicArray<T>*, BasicArray<T>*);                                                    \
  template BasicArray<T> conv2d(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>*, Conv2dSpec);      \
  template void conv2d_backward(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&, Conv2dSpec,      \
                                BasicArray<T>*, BasicArray<T>*, BasicArray<T>*);                                    \
  template BasicArray<T> deformable_conv2d(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&,        \
                                           const BasicArray<T>*, Conv2dSpec);                                       \
  template void deformable_conv2d_backward(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&,       \
                                           const BasicArray<T>&, Conv2dSpec, BasicArray<T>*, BasicArray<T>*,        \
                                           BasicArray<T>*, BasicArray<T>*);                                         \
  template BasicArray<T> transposed_conv2d(const BasicArray<T>&, const BasicArray<T>&, std::size_t,                 \
                                           const BasicArray<T>*);                                                   \
  template void transposed_conv2d_backward(const BasicArray<T>&, const BasicArray<T>&, std::size_t,                \
                                           const BasicArray<T>&, BasicArray<T>*, BasicArray<T>*, BasicArray<T>*);   \
  template BasicArray<T> layer_norm(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&, std::size_t); \
  template void layer_norm_backward(const BasicArray<T>&, const BasicArray<T>&, std::size_t, const BasicArray<T>&, \
                                    BasicArray<T>*, BasicArray<T>*, BasicArray<T>*);                                \
  template BasicArray<T> gelu(const BasicArray<T>&);                                                                \
  template void gelu_backward(const BasicArray<T>&, const BasicArray<T>&, BasicArray<T>&);                          \
  template BasicArray<T> sigmoid(const BasicArray<T>&);                                                             \
  template BasicArray<T> resize_bilinear(const BasicArray<T>&, std::size_t, std::size_t);                           \
  template void resize_bilinear_backward(const BasicArray<T>&, const Shape&, BasicArray<T>&);                       \
  template BasicArray<T> avg_pool2d(const BasicArray<T>&, std::size_t);                                             \
  template void avg_pool2d_backward(const BasicArray<T>&, std::size_t, BasicArray<T>&);                             \
  template BasicArray<T> global_avg_pool(const BasicArray<T>&);                                                     \
  template BasicArray<T> scale_channels(const BasicArray<T>&, const BasicArray<T>&);                                \
  template BasicArray<T> map_to_tokens(const BasicArray<T>&);                                                       \
  template BasicArray<T> tokens_to_map(const BasicArray<T>&, std::size_t, std::size_t);                             \
  template BasicArray<T> concat_axis1(const BasicArray<T>&, const BasicArray<T>&);                                  \
  template BasicArray<T> attention_core(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&,           \
                                        std::size_t, BasicArray<T>*);                                               \
  template void attention_core_backward(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&,          \
                                        std::size_t, const BasicArray<T>&, const BasicArray<T>&, BasicArray<T>*,    \
                                        BasicArray<T>*, BasicArray<T>*);                                            \
  template BasicArray<T> multi_head_attention(const BasicArray<T>&, const BasicArray<T>&, const BasicArray<T>&,     \
                                              std::size_t, const AttentionWeights<T>&, BasicArray<T>*);

CLICKREFINE_INSTANTIATE_OPS(float)
CLICKREFINE_INSTANTIATE_OPS(double)

#undef CLICKREFINE_INSTANTIATE_OPS

}  // namespace clickrefine::ops
