#include "distillscope/graph.hpp"

#include <cmath>

namespace distillscope {

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
void Graph<T>::non_finite(std::size_t id, const char* what) const {
  throw NumericError(std::string("non-finite ") + what + " at node #" + std::to_string(id) + " (" +
                     nodes_[id].op + ")");
}

template <typename T>
Var Graph<T>::leaf(Tensor<T> value, bool requires_grad, std::string name) {
  Node n;
  n.op = std::move(name);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  if (!nodes_.back().value.all_finite()) non_finite(nodes_.size() - 1, "value");
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::record(std::string op, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  for (Var in : inputs) {
    if (in.id >= nodes_.size()) throw ContractError("node input refers to a later or foreign node");
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  if (!nodes_.back().value.all_finite()) non_finite(nodes_.size() - 1, "value");
  return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
std::span<T> Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad.data();
}

template <typename T>
void Graph<T>::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(root.value.shape()));
  for (auto& n : nodes_) n.grad = Tensor<T>();
  root.grad = Tensor<T>(root.value.shape(), T(1));

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    if (!n.grad.all_finite()) non_finite(id, "gradient");
    // The closure may grow grads of earlier nodes but never touches this one.
    n.backward(*this, n.grad);
    for (Var in : n.inputs) {
      const Node& src = nodes_[in.id];
      if (!src.grad.empty() && !src.grad.all_finite()) non_finite(id, "gradient produced");
    }
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace distillscope
