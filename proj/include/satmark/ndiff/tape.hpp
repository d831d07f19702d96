#pragma once

#include <functional>
#include <vector>

#include "satmark/ndiff/tensor.hpp"

namespace satmark::ndiff {

template <typename Scalar>
class Tape;

// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  using Array = ArrayX<Scalar>;

  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  const Array& value() const;
  bool requires_grad() const;
  Eigen::Index numel() const { return value().size(); }
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape().size()); }
  Scalar item() const;
  Tensor<Scalar> tensor() const { return Tensor<Scalar>(shape(), value()); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

// Ordered record of executed operations. Node ids grow in execution order, so
// walking ids downward is a reverse topological traversal.
template <typename Scalar>
class Tape {
 public:
  using Array = ArrayX<Scalar>;
  using Backward = std::function<void(Tape&, const Array& grad_out)>;

  struct Node {
    Shape shape;
    Array value;
    Array grad;
    bool requires_grad = false;
    Backward backward;
    Tensor<Scalar>* bound = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var<Scalar> constant(const Tensor<Scalar>& t) { return push(t.shape, t.data, false, {}); }
  Var<Scalar> constant(Shape shape, Array value) { return push(std::move(shape), std::move(value), false, {}); }

  // Value whose gradient is accumulated into `t.grad` by backward() when
  // t.requires_grad is set. The tensor must outlive the tape's backward call.
  Var<Scalar> leaf(Tensor<Scalar>& t) {
    Var<Scalar> v = push(t.shape, t.data, t.requires_grad, {});
    if (t.requires_grad) nodes_.back().bound = &t;
    return v;
  }

  // Records an operation result. `backward` receives d(loss)/d(result) and must
  // route it to the operation's inputs via accumulate().
  Var<Scalar> push(Shape shape, Array value, bool requires_grad, Backward backward) {
    if (!value.isFinite().all())
      throw NumericError("non-finite value produced by operation (shape " + shape_str(shape) + ")");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Allocates (zeroed) and returns the gradient buffer of a node, for
  // operations that scatter into their input gradient.
  Array& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Array::Zero(n.value.size());
    return n.grad;
  }

  void backward(const Var<Scalar>& loss) {
    if (loss.value().size() != 1) throw ContractError("backward requires a scalar loss, got shape " +
                                                      shape_str(loss.shape()));
    for (auto& n : nodes_) n.grad.resize(0);
    Node& root = nodes_[static_cast<std::size_t>(loss.id())];
    if (!root.requires_grad) return;
    root.grad = Array::Ones(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.bound) {
        Tensor<Scalar>& t = *n.bound;
        if (!t.grad || t.grad->size() != n.grad.size())
          t.grad = n.grad;
        else
          *t.grad += n.grad;
      }
    }
  }

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

template <typename Scalar>
const Shape& Var<Scalar>::shape() const {
  return tape_->node(id_).shape;
}
template <typename Scalar>
const typename Var<Scalar>::Array& Var<Scalar>::value() const {
  return tape_->node(id_).value;
}
template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}
template <typename Scalar>
Scalar Var<Scalar>::item() const {
  if (value().size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return value()[0];
}

}  // namespace satmark::ndiff
