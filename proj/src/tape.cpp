#include "wf/tape.hpp"

#include <stdexcept>

namespace wf {

Tape::Node& Tape::node(int id) {
  if (id < 0 || id >= size()) throw std::out_of_range("tape node id " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

const Tape::Node& Tape::node(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("tape node id " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

Var Tape::leaf(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

Var Tape::emit(Tensor value, std::vector<int> parents, BackwardFn back) {
  for (int p : parents)
    if (p < 0 || p >= size())
      throw std::invalid_argument("emit: parent id " + std::to_string(p) + " not on tape");
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

Tensor& Tape::grad(int id) {
  Node& n = node(id);
  if (!n.grad_alloc) {
    n.grad = Tensor::zeros(n.value.shape());
    n.grad_alloc = true;
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: node belongs to another tape");
  if (loss.id < 0 || loss.id >= size()) throw std::invalid_argument("backward: node id not on tape");
  if (ran_backward_) throw std::logic_error("backward: tape already consumed; build a fresh tape");
  if (node(loss.id).value.numel() != 1)
    throw std::invalid_argument("backward: target must be scalar, got shape " +
                                shape_str(node(loss.id).value.shape()));
  ran_backward_ = true;

  // Reverse reachability from the loss so unrelated subgraphs cost nothing.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{loss.id};
  reachable[static_cast<size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : node(id).parents)
      if (!reachable[static_cast<size_t>(p)]) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
  }

  grad(loss.id).array().setConstant(1.0);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!reachable[static_cast<size_t>(id)] || !n.grad_alloc) continue;
    if (n.back) n.back(*this, id);
  }

  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (!reachable[i] || n.param == nullptr || !n.param->trainable || !n.grad_alloc) continue;
    n.param->grad.array() += n.grad.array();
  }
}

}  // namespace wf
