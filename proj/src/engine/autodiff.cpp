#include "clickrefine/engine/autodiff.hpp"

#include <string>

namespace clickrefine::ad {
namespace {

template <typename T>
Tape<T>& tape_of(Var<T> v) {
  return *v.tape;
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vars, const OptVar<T>& extra) {
  return any_grad(vars) || (extra && extra->requires_grad());
}

template <typename T>
BasicArray<T>* grad_if(Tape<T>& tape, Var<T> v) {
  return v.requires_grad() ? &tape.grad(v) : nullptr;
}

template <typename T>
BasicArray<T>* grad_if(Tape<T>& tape, const OptVar<T>& v) {
  return (v && v->requires_grad()) ? &tape.grad(*v) : nullptr;
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  BasicArray<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape_of(a).push(std::move(out), any_grad({a, b}), [a, b](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    for (Var<T> in : {a, b}) {
      if (!in.requires_grad()) continue;
      BasicArray<T>& dst = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  BasicArray<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape_of(a).push(std::move(out), any_grad({a, b}), [a, b](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    if (a.requires_grad()) {
      BasicArray<T>& dst = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (b.requires_grad()) {
      BasicArray<T>& dst = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  BasicArray<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape_of(a).push(std::move(out), any_grad({a, b}), [a, b](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    if (a.requires_grad()) {
      BasicArray<T>& dst = t.grad(a);
      const BasicArray<T>& other = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
    }
    if (b.requires_grad()) {
      BasicArray<T>& dst = t.grad(b);
      const BasicArray<T>& other = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> affine(Var<T> x, double alpha, double beta) {
  BasicArray<T> out = x.value();
  const T a = static_cast<T>(alpha), b = static_cast<T>(beta);
  for (auto& v : out.values()) v = a * v + b;
  return tape_of(x).push(std::move(out), x.requires_grad(), [x, a](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    BasicArray<T>& dst = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += a * g[i];
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  if (s.value().size() != 1) throw DimensionError("mul_scalar: scale must have one element");
  BasicArray<T> out = x.value();
  const T scale = s.value()[0];
  for (auto& v : out.values()) v *= scale;
  return tape_of(x).push(std::move(out), any_grad({x, s}), [x, s](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    if (x.requires_grad()) {
      BasicArray<T>& dst = t.grad(x);
      const T scale = s.value()[0];
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * scale;
    }
    if (s.requires_grad()) {
      T acc{0};
      const BasicArray<T>& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad(s)[0] += acc;
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, OptVar<T> bias) {
  BasicArray<T> out = ops::linear(x.value(), w.value(), bias ? &bias->value() : nullptr);
  return tape_of(x).push(std::move(out), any_grad({x, w}, bias), [x, w, bias](Tape<T>& t, std::size_t self) {
    ops::linear_backward(x.value(), w.value(), t.grad(self), grad_if(t, x), grad_if(t, w), grad_if(t, bias));
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, OptVar<T> bias, ops::Conv2dSpec spec) {
  BasicArray<T> out = ops::conv2d(x.value(), kernel.value(), bias ? &bias->value() : nullptr, spec);
  return tape_of(x).push(std::move(out), any_grad({x, kernel}, bias),
                         [x, kernel, bias, spec](Tape<T>& t, std::size_t self) {
                           ops::conv2d_backward(x.value(), kernel.value(), t.grad(self), spec, grad_if(t, x),
                                                grad_if(t, kernel), grad_if(t, bias));
                         });
}

template <typename T>
Var<T> deformable_conv2d(Var<T> x, Var<T> kernel, Var<T> offsets, OptVar<T> bias, ops::Conv2dSpec spec) {
  BasicArray<T> out =
      ops::deformable_conv2d(x.value(), kernel.value(), offsets.value(), bias ? &bias->value() : nullptr, spec);
  return tape_of(x).push(std::move(out), any_grad({x, kernel, offsets}, bias),
                         [x, kernel, offsets, bias, spec](Tape<T>& t, std::size_t self) {
                           ops::deformable_conv2d_backward(x.value(), kernel.value(), offsets.value(), t.grad(self),
                                                           spec, grad_if(t, x), grad_if(t, kernel),
                                                           grad_if(t, offsets), grad_if(t, bias));
                         });
}

template <typename T>
Var<T> transposed_conv2d(Var<T> x, Var<T> kernel, std::size_t stride, OptVar<T> bias) {
  BasicArray<T> out = ops::transposed_conv2d(x.value(), kernel.value(), stride, bias ? &bias->value() : nullptr);
  return tape_of(x).push(std::move(out), any_grad({x, kernel}, bias),
                         [x, kernel, stride, bias](Tape<T>& t, std::size_t self) {
                           ops::transposed_conv2d_backward(x.value(), kernel.value(), stride, t.grad(self),
                                                           grad_if(t, x), grad_if(t, kernel), grad_if(t, bias));
                         });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, std::size_t axis) {
  BasicArray<T> out = ops::layer_norm(x.value(), gain.value(), shift.value(), axis);
  return tape_of(x).push(std::move(out), any_grad({x, gain, shift}),
                         [x, gain, shift, axis](Tape<T>& t, std::size_t self) {
                           ops::layer_norm_backward(x.value(), gain.value(), axis, t.grad(self), grad_if(t, x),
                                                    grad_if(t, gain), grad_if(t, shift));
                         });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  return tape_of(x).push(ops::gelu(x.value()), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    ops::gelu_backward(x.value(), t.grad(self), t.grad(x));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return tape_of(x).push(ops::sigmoid(x.value()), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& y = t.value(Var<T>{&t, self});
    const BasicArray<T>& g = t.grad(self);
    BasicArray<T>& dst = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> resize_bilinear(Var<T> x, std::size_t out_h, std::size_t out_w) {
  return tape_of(x).push(ops::resize_bilinear(x.value(), out_h, out_w), x.requires_grad(),
                         [x](Tape<T>& t, std::size_t self) {
                           ops::resize_bilinear_backward(t.grad(self), x.shape(), t.grad(x));
                         });
}

template <typename T>
Var<T> avg_pool2d(Var<T> x, std::size_t k) {
  return tape_of(x).push(ops::avg_pool2d(x.value(), k), x.requires_grad(), [x, k](Tape<T>& t, std::size_t self) {
    ops::avg_pool2d_backward(t.grad(self), k, t.grad(x));
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  return tape_of(x).push(ops::global_avg_pool(x.value()), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    BasicArray<T>& dst = t.grad(x);
    const std::size_t plane = x.shape()[2] * x.shape()[3];
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t p = 0; p < g.size(); ++p) {
      for (std::size_t i = 0; i < plane; ++i) dst[p * plane + i] += g[p] * inv;
    }
  });
}

template <typename T>
Var<T> scale_channels(Var<T> x, Var<T> s) {
  return tape_of(x).push(ops::scale_channels(x.value(), s.value()), any_grad({x, s}),
                         [x, s](Tape<T>& t, std::size_t self) {
                           const BasicArray<T>& g = t.grad(self);
                           const std::size_t plane = x.shape()[2] * x.shape()[3];
                           const BasicArray<T>& xv = x.value();
                           const BasicArray<T>& sv = s.value();
                           if (x.requires_grad()) {
                             BasicArray<T>& dst = t.grad(x);
                             for (std::size_t p = 0; p < sv.size(); ++p) {
                               for (std::size_t i = 0; i < plane; ++i) dst[p * plane + i] += g[p * plane + i] * sv[p];
                             }
                           }
                           if (s.requires_grad()) {
                             BasicArray<T>& dst = t.grad(s);
                             for (std::size_t p = 0; p < sv.size(); ++p) {
                               T acc{0};
                               for (std::size_t i = 0; i < plane; ++i) acc += g[p * plane + i] * xv[p * plane + i];
                               dst[p] += acc;
                             }
                           }
                         });
}

template <typename T>
Var<T> map_to_tokens(Var<T> x) {
  return tape_of(x).push(ops::map_to_tokens(x.value()), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const BasicArray<T> back = ops::tokens_to_map(t.grad(self), x.shape()[2], x.shape()[3]);
    BasicArray<T>& dst = t.grad(x);
    for (std::size_t i = 0; i < back.size(); ++i) dst[i] += back[i];
  });
}

template <typename T>
Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w) {
  return tape_of(tokens).push(ops::tokens_to_map(tokens.value(), h, w), tokens.requires_grad(),
                              [tokens](Tape<T>& t, std::size_t self) {
                                const BasicArray<T> back = ops::map_to_tokens(t.grad(self));
                                BasicArray<T>& dst = t.grad(tokens);
                                for (std::size_t i = 0; i < back.size(); ++i) dst[i] += back[i];
                              });
}

template <typename T>
Var<T> concat_axis1(Var<T> a, Var<T> b) {
  return tape_of(a).push(ops::concat_axis1(a.value(), b.value()), any_grad({a, b}),
                         [a, b](Tape<T>& t, std::size_t self) {
                           const BasicArray<T>& g = t.grad(self);
                           std::size_t inner = 1;
                           for (std::size_t i = 2; i < a.shape().size(); ++i) inner *= a.shape()[i];
                           const std::size_t na = a.shape()[1] * inner, nb = b.shape()[1] * inner;
                           for (std::size_t o = 0; o < a.shape()[0]; ++o) {
                             if (a.requires_grad()) {
                               BasicArray<T>& dst = t.grad(a);
                               for (std::size_t i = 0; i < na; ++i) dst[o * na + i] += g[o * (na + nb) + i];
                             }
                             if (b.requires_grad()) {
                               BasicArray<T>& dst = t.grad(b);
                               for (std::size_t i = 0; i < nb; ++i) dst[o * nb + i] += g[o * (na + nb) + na + i];
                             }
                           }
                         });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  return tape_of(x).push(x.value().reshaped(std::move(shape)), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const BasicArray<T>& g = t.grad(self);
    BasicArray<T>& dst = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> slice_columns(Var<T> x, std::size_t begin, std::size_t end) {
  const BasicArray<T>& xv = x.value();
  if (xv.rank() != 2 || begin >= end || end > xv.dim(1)) {
    throw DimensionError("slice_columns: bad range for " + shape_to_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1), width = end - begin;
  BasicArray<T> out(Shape{rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = xv[r * cols + begin + c];
  }
  return tape_of(x).push(std::move(out), x.requires_grad(),
                         [x, begin, rows, cols, width](Tape<T>& t, std::size_t self) {
                           const BasicArray<T>& g = t.grad(self);
                           BasicArray<T>& dst = t.grad(x);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < width; ++c) dst[r * cols + begin + c] += g[r * width + c];
                           }
                         });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  Tape<T>& tape = tape_of(q);
  BasicArray<T> probs;
  BasicArray<T> out = ops::attention_core(q.value(), k.value(), v.value(), heads, &probs);
  if (tape.record_attention()) tape.attention_log().push_back(probs);
  const bool needs = any_grad({q, k, v});
  return tape.push(std::move(out), needs,
                   [q, k, v, heads, probs = needs ? std::move(probs) : BasicArray<T>()](Tape<T>& t,
                                                                                        std::size_t self) {
                     ops::attention_core_backward(q.value(), k.value(), v.value(), heads, probs, t.grad(self),
                                                  grad_if(t, q), grad_if(t, k), grad_if(t, v));
                   });
}

template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionVars<T>& p) {
  const Var<T> qp = linear(q, p.wq, OptVar<T>(p.bq));
  const Var<T> kp = linear(k, p.wk, OptVar<T>(p.bk));
  const Var<T> vp = linear(v, p.wv, OptVar<T>(p.bv));
  return linear(attention(qp, kp, vp, heads), p.wo, OptVar<T>(p.bo));
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  return tape_of(x).push(BasicArray<T>::scalar(acc), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& d : t.grad(x).values()) d += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  return affine(sum(x), 1.0 / static_cast<double>(n), 0.0);
}

#define CLICKREFINE_INSTANTIATE_AD(T)                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                                  \
  template Var<T> sub(Var<T>, Var<T>);                                                                  \
  template Var<T> mul(Var<T>, Var<T>);                                                                  \
  template Var<T> affine(Var<T>, double, double);                                                       \
  template Var<T> mul_scalar(Var<T>, Var<T>);                                                           \
  template Var<T> linear(Var<T>, Var<T>, OptVar<T>);                                                    \
  template Var<T> conv2d(Var<T>, Var<T>, OptVar<T>, ops::Conv2dSpec);                                   \
  template Var<T> deformable_conv2d(Var<T>, Var<T>, Var<T>, OptVar<T>, ops::Conv2dSpec);                \
  template Var<T> transposed_conv2d(Var<T>, Var<T>, std::size_t, OptVar<T>);                            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, std::size_t);                                      \
  template Var<T> gelu(Var<T>);                                                                         \
  template Var<T> sigmoid(Var<T>);                                                                      \
  template Var<T> resize_bilinear(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> avg_pool2d(Var<T>, std::size_t);                                                      \
  template Var<T> global_avg_pool(Var<T>);                                                              \
  template Var<T> scale_channels(Var<T>, Var<T>);                                                       \
  template Var<T> map_to_tokens(Var<T>);                                                                \
  template Var<T> tokens_to_map(Var<T>, std::size_t, std::size_t);                                      \
  template Var<T> concat_axis1(Var<T>, Var<T>);                                                         \
  template Var<T> reshape(Var<T>, Shape);                                                               \
  template Var<T> slice_columns(Var<T>, std::size_t, std::size_t);                                      \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, std::size_t);                                       \
  template Var<T> multi_head_attention(Var<T>, Var<T>, Var<T>, std::size_t, const AttentionVars<T>&);   \
  template Var<T> sum(Var<T>);                                                                          \
  template Var<T> mean(Var<T>);

CLICKREFINE_INSTANTIATE_AD(float)
CLICKREFINE_INSTANTIATE_AD(double)

#undef CLICKREFINE_INSTANTIATE_AD

}  // namespace clickrefine::ad
