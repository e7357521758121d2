#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "savae/error.hpp"
#include "savae/params.hpp"
#include "savae/rng.hpp"
#include "savae/tensor.hpp"

namespace savae::ad {

using NodeId = std::size_t;
class Tape;

/// Handle to a tensor recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Append-only record of primitive evaluations. Every stochastic primitive
/// draws from the tape's own noise stream, so a tape built twice from the same
/// seed and inputs replays bit-identically.
class Tape {
 public:
  /// Propagates the gradient of node `self` into its parents.
  using BackwardFn = std::function<void(Tape&, NodeId self)>;

  explicit Tape(std::uint64_t seed = 0) : noise_(seed), seed_(seed) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{"leaf", std::move(value), {}, nullptr, requires_grad});
    return {this, nodes_.size() - 1};
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a primitive. The backward closure is dropped when no parent
  /// requires a gradient.
  Var record(std::string_view op, Tensor value, std::vector<NodeId> parents, BackwardFn backward) {
    check_finite(op, value);
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    if (!rg) backward = nullptr;
    nodes_.push_back(Node{std::string(op), std::move(value), std::move(parents), std::move(backward), rg});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const std::string& op(NodeId id) const { return nodes_[id].op; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }
  std::size_t size() const { return nodes_.size(); }

  std::uint64_t seed() const { return seed_; }
  NoiseStream& noise() { return noise_; }

  /// Gradient buffer of `id`, allocated as zeros on first use.
  Tensor& grad_buffer(NodeId id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (g.shape() != nodes_[id].value.shape()) g = Tensor(nodes_[id].value.shape());
    return g;
  }
  bool has_grad(NodeId id) const { return id < grads_.size() && grads_[id].shape() == nodes_[id].value.shape(); }

  /// Gradient reached at `v` by the last backward pass (zeros if unreached).
  Tensor grad(Var v) const {
    if (has_grad(v.id())) return grads_[v.id()];
    return Tensor(nodes_[v.id()].value.shape());
  }

  bool consumed() const { return consumed_; }

  /// Reverse pass seeded with d(root) = upstream. A tape supports one pass.
  void backward(Var root, const Tensor& upstream) {
    if (consumed_) throw UsedTape();
    if (upstream.shape() != nodes_[root.id()].value.shape())
      throw ShapeError("backward", upstream.shape(), nodes_[root.id()].value.shape());
    consumed_ = true;
    grads_.resize(nodes_.size());  // closures hold references into grads_
    grad_buffer(root.id()).vec() += upstream.vec();
    for (NodeId i = root.id() + 1; i-- > 0;) {
      const auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || !has_grad(i)) continue;
      n.backward(*this, i);
    }
  }

  void backward(Var root) {
    if (nodes_[root.id()].value.size() != 1)
      throw ShapeError("backward without upstream needs a scalar root, got " +
                       shape_to_string(nodes_[root.id()].value.shape()));
    backward(root, Tensor::filled(nodes_[root.id()].value.shape(), 1.0));
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad;
  };

  void check_finite(std::string_view op, const Tensor& value) const {
    if (!value.all_finite()) throw NonFiniteValue(std::string(op), nodes_.size());
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  NoiseStream noise_;
  std::uint64_t seed_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

/// Name -> Var view of a ModelParams placed on a tape.
class ParamVars {
 public:
  ParamVars() = default;
  ParamVars(Tape& tape, const ModelParams& params, bool requires_grad) {
    for (const auto& [name, t] : params) add(name, tape.leaf(t, requires_grad));
  }

  void add(const std::string& name, Var v) {
    index_.emplace(name, vars_.size());
    vars_.emplace_back(name, v);
  }
  bool contains(const std::string& name) const { return index_.contains(name); }
  Var operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter '" + name + "' on tape");
    return vars_[it->second].second;
  }
  const auto& entries() const { return vars_; }

  /// Gradients of the leaves after a backward pass, laid out like the params.
  ModelParams gradients() const {
    ModelParams out;
    for (const auto& [name, v] : vars_) out.add(name, v.tape().grad(v));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var>> vars_;
  std::map<std::string, std::size_t> index_;
};

/// Result of taping a scalar function of a parameter set.
struct TapedValue {
  double value = 0.0;
  std::unique_ptr<Tape> tape;
  ParamVars inputs;
  Var root;
};

/// Evaluates `f(tape, inputs)` on a fresh tape seeded with `seed`.
/// `f` must return a single-element Var.
template <class F>
TapedValue forward(F&& f, const ModelParams& inputs, std::uint64_t seed) {
  TapedValue out;
  out.tape = std::make_unique<Tape>(seed);
  out.inputs = ParamVars(*out.tape, inputs, true);
  out.root = f(*out.tape, out.inputs);
  out.value = out.root.value().item();
  return out;
}

/// Gradient of the taped value with respect to every input; consumes the tape.
inline ModelParams backward(TapedValue& taped) {
  taped.tape->backward(taped.root);
  return taped.inputs.gradients();
}

}  // namespace savae::ad
