#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distillscope/tensor.hpp"

namespace distillscope {

/// GUIDED gates ReLU backward on the sign of the incoming gradient as well
/// as on the forward input (guided backpropagation).
enum class BackwardMode { Standard, Guided };

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t kInvalid = static_cast<std::size_t>(-1);
  std::size_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
};

/// Define-by-run tape. Nodes are appended in evaluation order, so inputs
/// always precede the nodes that consume them.
template <typename T>
class Graph {
 public:
  /// Called during backward() with the accumulated gradient of the node's
  /// output; pushes contributions into input gradients via grad_buffer().
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& grad_out)>;

  explicit Graph(BackwardMode mode = BackwardMode::Standard) : mode_(mode) {}

  Var leaf(Tensor<T> value, bool requires_grad, std::string name = "leaf");

  /// Appends an operation node. The backward function is dropped when no
  /// input requires a gradient.
  Var record(std::string op, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward);

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const std::string& op(Var v) const { return node(v).op; }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }
  /// Gradient of the last backward() loss w.r.t. v; zeros when v was not reached.
  Tensor<T> grad(Var v) const;

  /// Mutable gradient accumulator for v, zero-initialised on first use.
  std::span<T> grad_buffer(Var v);

  /// Reverse-mode sweep from a single-element loss. Clears previous gradients.
  void backward(Var loss);

  BackwardMode mode() const noexcept { return mode_; }
  void set_mode(BackwardMode mode) noexcept { mode_ = mode; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    std::vector<Var> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  [[noreturn]] void non_finite(std::size_t id, const char* what) const;

  std::vector<Node> nodes_;
  BackwardMode mode_;
};

// Differentiable operations. Shapes use NCHW for images.

/// Cross-correlation. kernel [F,C,kh,kw], optional bias [F].
template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernel, std::optional<Var> bias, int stride, int padding);

template <typename T>
Var relu(Graph<T>& g, Var input);

/// Max over window x window patches; gradient goes to the first maximal
/// element in row-major order.
template <typename T>
Var maxpool2d(Graph<T>& g, Var input, int window, int stride);

/// input [N,D] x weight [D,K] (+ bias [K]).
template <typename T>
Var dense(Graph<T>& g, Var input, Var weight, std::optional<Var> bias);

/// [N, ...] -> [N, prod(...)].
template <typename T>
Var flatten(Graph<T>& g, Var input);

template <typename T>
Var reshape(Graph<T>& g, Var input, Shape shape);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var scale(Graph<T>& g, Var a, T factor);

/// Sum of all elements as a one-element tensor, accumulated in double.
template <typename T>
Var sum(Graph<T>& g, Var a);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace distillscope
