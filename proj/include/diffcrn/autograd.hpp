#pragma once

#include "diffcrn/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace diffcrn {

/// A learnable array with its accumulated gradient.
template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)), grad(Mat<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Every op appends a node holding its forward value and a
/// closure that pushes the node's gradient into its inputs. Nodes are visited
/// in reverse creation order, which is a valid topological order.
template <typename S>
class Graph {
 public:
  using Backward = std::function<void(Graph&, Var)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat<S> value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf bound to a parameter; its gradient is added into `p.grad` by backward().
  Var param(Parameter<S>& p) {
    Var v = push(p.value, grad_enabled_, &p, {});
    return v;
  }

  const Mat<S>& value(Var v) const { return nodes_[v.id]->value; }
  S scalar(Var v) const { return nodes_[v.id]->value(0, 0); }
  bool needs_grad(Var v) const { return nodes_[v.id]->needs_grad; }
  bool has_grad(Var v) const { return nodes_[v.id]->grad.size() > 0; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialised on first access.
  Mat<S>& grad(Var v) {
    Node& n = *nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var record(Mat<S> value, std::initializer_list<Var> inputs, Backward bw) {
    bool ng = false;
    if (grad_enabled_) {
      for (Var in : inputs) ng = ng || nodes_[in.id]->needs_grad;
    }
    return push(std::move(value), ng, nullptr, ng ? std::move(bw) : Backward{});
  }

  void backward(Var loss) {
    require(value(loss).size() == 1, "backward: loss must be a scalar");
    require(grad_enabled_, "backward: graph was built without gradients");
    grad(loss).setOnes();
    for (int id = loss.id; id >= 0; --id) {
      Node& n = *nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, Var{id});
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
          n.param->zero_grad();
        }
        n.param->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    Backward backward;
    Parameter<S>* param = nullptr;
    bool needs_grad = false;
  };

  Var push(Mat<S> value, bool needs_grad, Parameter<S>* param, Backward bw) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    n->param = param;
    n->backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace diffcrn
