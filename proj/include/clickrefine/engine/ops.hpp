#pragma once

#include <cstddef>

#include "clickrefine/core/array.hpp"

// Tensor-level kernels used directly by the frozen forward path and wrapped by
// the autodiff tape for the trainable path. Backward functions accumulate into
// whichever gradient outputs are non-null.

namespace clickrefine::ops {

inline constexpr double kNormEpsilon = 1e-6;

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

// x [L, Din] * w [Din, Dout] + bias [Dout]
template <typename T>
BasicArray<T> linear(const BasicArray<T>& x, const BasicArray<T>& w, const BasicArray<T>* bias);

template <typename T>
void linear_backward(const BasicArray<T>& x, const BasicArray<T>& w, const BasicArray<T>& dy, BasicArray<T>* dx,
                     BasicArray<T>* dw, BasicArray<T>* dbias);

// ---------------------------------------------------------------------------
// Convolutions (NCHW)
// ---------------------------------------------------------------------------

// kernel [O, C/groups, kh, kw]; standard cross-correlation.
template <typename T>
BasicArray<T> conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel, const BasicArray<T>* bias,
                     Conv2dSpec spec = {});

template <typename T>
void conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel, const BasicArray<T>& dy,
                     Conv2dSpec spec, BasicArray<T>* dinput, BasicArray<T>* dkernel, BasicArray<T>* dbias);

// offsets [N, 2*kh*kw, Ho, Wo]; channel 2t holds dx and 2t+1 holds dy for tap t
// (taps in row-major kernel order). Samples are bilinear; outside reads 0.
template <typename T>
BasicArray<T> deformable_conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel,
                                const BasicArray<T>& offsets, const BasicArray<T>* bias, Conv2dSpec spec = {});

template <typename T>
void deformable_conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel,
                                const BasicArray<T>& offsets, const BasicArray<T>& dy, Conv2dSpec spec,
                                BasicArray<T>* dinput, BasicArray<T>* dkernel, BasicArray<T>* doffsets,
                                BasicArray<T>* dbias);

// Adjoint of conv2d (padding 0) with the same kernel [O, C, kh, kw]: maps an
// [N, O, H, W] input to [N, C, (H-1)*stride+kh, (W-1)*stride+kw].
template <typename T>
BasicArray<T> transposed_conv2d(const BasicArray<T>& input, const BasicArray<T>& kernel, std::size_t stride,
                                const BasicArray<T>* bias = nullptr);

template <typename T>
void transposed_conv2d_backward(const BasicArray<T>& input, const BasicArray<T>& kernel, std::size_t stride,
                                const BasicArray<T>& dy, BasicArray<T>* dinput, BasicArray<T>* dkernel,
                                BasicArray<T>* dbias);

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

// Normalizes over `axis`; gain/shift have shape [dim(axis)].
template <typename T>
BasicArray<T> layer_norm(const BasicArray<T>& x, const BasicArray<T>& gain, const BasicArray<T>& shift,
                         std::size_t axis);

template <typename T>
void layer_norm_backward(const BasicArray<T>& x, const BasicArray<T>& gain, std::size_t axis,
                         const BasicArray<T>& dy, BasicArray<T>* dx, BasicArray<T>* dgain, BasicArray<T>* dshift);

template <typename T>
BasicArray<T> gelu(const BasicArray<T>& x);
template <typename T>
void gelu_backward(const BasicArray<T>& x, const BasicArray<T>& dy, BasicArray<T>& dx);

template <typename T>
BasicArray<T> sigmoid(const BasicArray<T>& x);

// ---------------------------------------------------------------------------
// Resampling and layout
// ---------------------------------------------------------------------------

// Half-pixel-centre bilinear resize of [N, C, H, W].
template <typename T>
BasicArray<T> resize_bilinear(const BasicArray<T>& x, std::size_t out_h, std::size_t out_w);
template <typename T>
void resize_bilinear_backward(const BasicArray<T>& dy, const Shape& input_shape, BasicArray<T>& dx);

// Non-overlapping k x k mean pooling; H and W must be divisible by k.
template <typename T>
BasicArray<T> avg_pool2d(const BasicArray<T>& x, std::size_t k);
template <typename T>
void avg_pool2d_backward(const BasicArray<T>& dy, std::size_t k, BasicArray<T>& dx);

// [N, C, H, W] -> [N, C]
template <typename T>
BasicArray<T> global_avg_pool(const BasicArray<T>& x);

// x [N, C, H, W] scaled per channel by s [N, C].
template <typename T>
BasicArray<T> scale_channels(const BasicArray<T>& x, const BasicArray<T>& s);

// [1, C, H, W] <-> [H*W, C]
template <typename T>
BasicArray<T> map_to_tokens(const BasicArray<T>& x);
template <typename T>
BasicArray<T> tokens_to_map(const BasicArray<T>& tokens, std::size_t h, std::size_t w);

// Concatenate along axis 1 (channels for NCHW, features for [L, D]).
template <typename T>
BasicArray<T> concat_axis1(const BasicArray<T>& a, const BasicArray<T>& b);

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Scaled dot-product attention over already-projected q [Lq, D], k/v [Lk, D],
// split into `heads` column blocks. probs (if given) receives [heads, Lq, Lk].
template <typename T>
BasicArray<T> attention_core(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                             std::size_t heads, BasicArray<T>* probs);

template <typename T>
void attention_core_backward(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                             std::size_t heads, const BasicArray<T>& probs, const BasicArray<T>& dy,
                             BasicArray<T>* dq, BasicArray<T>* dk, BasicArray<T>* dv);

template <typename T>
struct AttentionWeights {
  BasicArray<T> wq, bq, wk, bk, wv, bv, wo, bo;  // w* are [D, D], b* are [D]
};

// Full multi-head attention with input/output projections.
template <typename T>
BasicArray<T> multi_head_attention(const BasicArray<T>& q, const BasicArray<T>& k, const BasicArray<T>& v,
                                   std::size_t heads, const AttentionWeights<T>& weights,
                                   BasicArray<T>* probs = nullptr);

}  // namespace clickrefine::ops
