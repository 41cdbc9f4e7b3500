#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "convert/numerics/named_tensors.hpp"
#include "convert/numerics/tensor.hpp"

namespace convert::nn {

template <class T>
class GradTape;

// Handle to a value recorded on a tape.
template <class T = float>
struct Var {
  GradTape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Records primitive operations during a forward pass. backward() replays the
// record in reverse, calling each node's adjoint exactly once.
//
// A tape built with record=false keeps forward values only; this is the
// inference mode used by evaluation and serving.
template <class T = float>
class GradTape {
 public:
  using Adjoint = std::function<void(GradTape&, std::size_t self)>;

  explicit GradTape(bool record = true) : record_(record) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push_leaf(std::move(value), nullptr, {}, false); }

  // Leaf that receives a gradient; used by tests and gradient checks.
  Var<T> variable(Tensor<T> value) { return push_leaf(std::move(value), nullptr, {}, record_); }

  // Leaf referencing parameter storage without copying it. The storage must
  // outlive the tape.
  Var<T> parameter(const std::string& name, const Tensor<T>& storage) {
    return push_leaf(Tensor<T>{}, &storage, name, record_);
  }

  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient slot of a node, allocated as zeros on first use.
  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }

  const Tensor<T>& grad(Var<T> v) {
    return grad_slot(v.id);
  }

  // Appends the result of an operation. The adjoint is stored only when the
  // tape records and some parent requires a gradient.
  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> parents, Adjoint adjoint,
              const char* op) {
    require_finite(value, op);
    bool needs = false;
    if (record_) {
      for (const Var<T>& p : parents) {
        check_owner(p);
        needs = needs || nodes_[p.id].requires_grad;
      }
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.adjoint = std::move(adjoint);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      fail(ErrorCode::contract, "variable does not belong to this tape");
    }
  }

  // Reverse sweep from a scalar loss. Gradients accumulate into node slots.
  void backward(Var<T> loss) {
    check_owner(loss);
    require(record_, ErrorCode::contract, "backward on a non-recording tape");
    if (!value(loss).is_scalar()) {
      fail(ErrorCode::contract, "backward requires a scalar loss, got shape " +
                                    shape_string(value(loss).shape()));
    }
    grad_slot(loss.id)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.adjoint && n.has_grad) n.adjoint(*this, i);
    }
  }

  // Gradient of every parameter in `params`, zero for those the loss does not
  // reach (including parameters never placed on this tape).
  Gradients<T> parameter_grads(const ParameterSet<T>& params) const {
    Gradients<T> out = params.zeros_like();
    for (const Node& n : nodes_) {
      if (n.param.empty() || !n.has_grad) continue;
      if (!out.contains(n.param)) continue;
      Tensor<T>& g = out.get(n.param);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    std::string param;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Adjoint adjoint;
  };

  Var<T> push_leaf(Tensor<T> value, const Tensor<T>* ref, std::string param, bool grad) {
    Node n;
    n.value = std::move(value);
    n.ref = ref;
    n.param = std::move(param);
    n.requires_grad = grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  bool record_;
  std::deque<Node> nodes_;
};

// Runs the reverse sweep and returns d(loss)/d(parameter) keyed by name.
template <class T>
Gradients<T> backward(GradTape<T>& tape, Var<T> loss, const ParameterSet<T>& params) {
  tape.backward(loss);
  return tape.parameter_grads(params);
}

}  // namespace convert::nn
