#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recat/error.hpp"
#include "recat/numerics/parameter.hpp"
#include "recat/numerics/tensor.hpp"

namespace recat {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T item() const { return value()[0]; }
  bool valid() const noexcept { return tape != nullptr; }
};

/// Row `row` of node `src`; the unit most chart entries are stored as.
template <class T>
struct RowRef {
  Var<T> src;
  std::uint32_t row = 0;

  T item() const { return src.value().at(row, 0); }
};

/// Reverse-mode tape.  Nodes are appended in topological order; backward
/// walks them in exact reverse order.  A tape constructed with
/// `record = false` computes values only.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf for a parameter; repeated calls return the same node.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value, true, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    param_order_.push_back(v.id);
    return v;
  }

  /// Records a node.  `requires_grad` is forced off when not recording.
  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }

  /// Gradient buffer of a node, allocated on first use.
  Tensor<T>& grad(std::uint32_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return n.grad;
  }
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }
  bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<T> loss) {
    if (!record_) throw NumericError("backward on a non-recording tape");
    const auto& lv = value(loss);
    if (lv.size() != 1) throw NumericError("backward needs a scalar loss, got " + lv.shape_string());
    if (!std::isfinite(static_cast<double>(lv[0]))) {
      throw NumericError("loss is not finite (" + std::to_string(static_cast<double>(lv[0])) + ")");
    }
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = T(1);
    for (std::int64_t i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }

  /// Adds `scale` times each parameter leaf's gradient into Parameter::grad,
  /// in leaf creation order.
  void accumulate_param_grads(T scale = T(1)) {
    for (auto id : param_order_) {
      auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      auto& dst = n.param->grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::uint32_t> param_nodes_;
  std::vector<std::uint32_t> param_order_;
};

}  // namespace recat
