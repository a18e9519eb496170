#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clickrefine/core/array.hpp"

namespace clickrefine {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicArray<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so a reverse
/// sweep over ids is a valid topological order. Only nodes that depend on a
/// gradient-requiring leaf keep a backward closure.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var<T> constant(BasicArray<T> value) { return push(std::move(value), false, nullptr); }

  Var<T> leaf(BasicArray<T> value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

  Var<T> push(BasicArray<T> value, bool requires_grad, Backward backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on the tape");
    nodes_.push_back(Node{std::move(value), BasicArray<T>(), requires_grad,
                          requires_grad ? std::move(backward) : Backward()});
    return Var<T>{this, nodes_.size() - 1};
  }

  const BasicArray<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer for a node, zero-initialised on first access.
  BasicArray<T>& grad(Var<T> v) { return grad(v.id); }
  BasicArray<T>& grad(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.shape() != node.value.shape()) node.grad = BasicArray<T>(node.value.shape());
    return node.grad;
  }
  bool has_grad(Var<T> v) const { return !nodes_.at(v.id).grad.empty(); }

  // Seeds d(root)/d(root) = 1 for a single-element root and sweeps backwards.
  void backward(Var<T> root) {
    if (value(root).size() != 1) throw DimensionError("backward: root must be a scalar");
    if (!requires_grad(root)) return;
    grad(root)[0] = T{1};
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, id);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Attention probability tensors seen during the forward pass, kept only when
  // enabled; used by invariant checks.
  void set_record_attention(bool on) { record_attention_ = on; }
  bool record_attention() const noexcept { return record_attention_; }
  std::vector<BasicArray<T>>& attention_log() noexcept { return attention_log_; }

 private:
  struct Node {
    BasicArray<T> value;
    BasicArray<T> grad;
    bool requires_grad;
    Backward backward;
  };

  std::vector<Node> nodes_;
  bool record_attention_ = false;
  std::vector<BasicArray<T>> attention_log_;
};

}  // namespace clickrefine
