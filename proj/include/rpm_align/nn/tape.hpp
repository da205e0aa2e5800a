#pragma once

#include "rpm_align/nn/tensor.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

namespace rpm_align::nn {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid for the
/// lifetime of the tape that created it.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
};

/// Dynamically recorded reverse-mode tape.
///
/// Each recorded node owns its forward value and, when any input requires a
/// gradient, a closure that pushes the node's output gradient into the
/// gradients of its parents. Nodes are appended in evaluation order, so a
/// reverse sweep is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When disabled, parameters are recorded as constants and no closures are
  /// stored (inference mode).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  Var parameter(Tensor value);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  /// Output gradient of a node; empty when nothing flowed into it.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }
  std::size_t parent(std::size_t id, std::size_t k) const { return nodes_[id].parents[k]; }

  /// Gradient accumulator of a node, zero-initialised on first use. Returns
  /// nullptr when the node does not require a gradient.
  Tensor* grad_slot(std::size_t id);

  /// Seeds d(root)/d(root) = 1 for a single-element root and sweeps backwards.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace rpm_align::nn
