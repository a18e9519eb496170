#pragma once

#include <cstddef>
#include <optional>

#include "clickrefine/engine/ops.hpp"
#include "clickrefine/engine/tape.hpp"

// Differentiable wrappers over clickrefine::ops. Each records its forward value
// and, when any input requires a gradient, a closure that pushes the incoming
// gradient to its inputs.

namespace clickrefine::ad {

template <typename T>
using OptVar = std::optional<Var<T>>;

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
// alpha * x + beta
template <typename T>
Var<T> affine(Var<T> x, double alpha, double beta);
// x scaled by a single-element variable
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s);

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, OptVar<T> bias);

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, OptVar<T> bias, ops::Conv2dSpec spec = {});
template <typename T>
Var<T> deformable_conv2d(Var<T> x, Var<T> kernel, Var<T> offsets, OptVar<T> bias, ops::Conv2dSpec spec = {});
template <typename T>
Var<T> transposed_conv2d(Var<T> x, Var<T> kernel, std::size_t stride, OptVar<T> bias);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, std::size_t axis);
template <typename T>
Var<T> gelu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);

template <typename T>
Var<T> resize_bilinear(Var<T> x, std::size_t out_h, std::size_t out_w);
template <typename T>
Var<T> avg_pool2d(Var<T> x, std::size_t k);
template <typename T>
Var<T> global_avg_pool(Var<T> x);
template <typename T>
Var<T> scale_channels(Var<T> x, Var<T> s);

template <typename T>
Var<T> map_to_tokens(Var<T> x);
template <typename T>
Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w);
template <typename T>
Var<T> concat_axis1(Var<T> a, Var<T> b);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
// Columns [begin, end) of a rank-2 value.
template <typename T>
Var<T> slice_columns(Var<T> x, std::size_t begin, std::size_t end);

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);

template <typename T>
struct AttentionVars {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionVars<T>& params);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);

}  // namespace clickrefine::ad
