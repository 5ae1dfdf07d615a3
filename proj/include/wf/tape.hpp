#pragma once

#include "wf/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace wf {

// Trainable (or frozen) model state. `grad` is an accumulator owned by the
// parameter itself, not by any tape: backward() adds into it and optimizer
// steps consume it. Frozen parameters (`trainable == false`) are never
// written to by backward().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_, bool trainable_ = true)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(Tensor::zeros(value.shape())),
        trainable(trainable_) {}

  void zero_grad() { grad.array().setZero(); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; dies with the tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  double scalar() const { return value().scalar_value(); }
};

// Applied in reverse creation order; reads grad(node_id) and adds into the
// grads of the node's parents.
using BackwardFn = std::function<void(Tape&, int node_id)>;

// Dynamic computation record, rebuilt for every forward pass. Node creation
// order is the topological order, so backward() is a single reverse sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Graph inputs.
  Var constant(Tensor value);
  Var leaf(Parameter& p);

  // Used by op kernels: record a value, its parents, and the backward rule.
  Var emit(Tensor value, std::vector<int> parents, BackwardFn back);

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& value(int id) const { return node(id).value; }

  // Gradient buffer for a node, allocated (zero) on first touch.
  Tensor& grad(int id);

  // Reverse-mode sweep from a scalar node. Accumulates d loss / d value into
  // every trainable Parameter leaf reachable from `loss`. One call per tape.
  void backward(const Var& loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_alloc = false;
    std::vector<int> parents;
    BackwardFn back;
    Parameter* param = nullptr;
  };

  Node& node(int id);
  const Node& node(int id) const;

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace wf
