#pragma once

// Minimal reverse-mode tape over row-major Eigen matrices.
//
// Every node owns (or, for parameters, references) a 2-D value. Nodes are
// appended in topological order, so backward() walks them in reverse and
// each node's closure pushes its gradient into its inputs.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "txnf/error.hpp"
#include "txnf/rng.hpp"

namespace txnf {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool decay = true;  // subject to decoupled weight decay
};

/// Named parameter tensors in registration order.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Mat<T> value, bool decay = true) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Mat<T>::Zero(value.rows(), value.cols());
    p->value = std::move(value);
    p->decay = decay;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::int64_t element_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, Var self)>;

  /// With track_grad off, parameters enter as constants and no closures are kept.
  explicit Graph(bool track_grad = true) : track_(track_grad) {}

  Var constant(Mat<T> value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = track_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Appends a computed node. `backward` runs only if some input needs a gradient.
  Var push(Mat<T> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.param ? n.param->value : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Mat<T>& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.param) return n.param->grad;
    if (n.grad.size() != n.value.size()) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 node and propagates.
  void backward(Var out) {
    if (value(out).size() != 1) throw Error("backward() expects a scalar node");
    grad(out)(0, 0) += T(1);
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward) continue;
      if (!n.param && n.grad.size() == 0) continue;  // nothing flowed in
      n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Total elements held by node values; a coarse activation-memory probe.
  std::int64_t activation_elements() const {
    std::int64_t n = 0;
    for (const auto& node : nodes_) n += node.value.size();
    return n;
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;  // deque: references survive push_back
  bool track_ = true;
};

}  // namespace txnf
