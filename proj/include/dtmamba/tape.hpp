#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtmamba/tensor.hpp"

namespace dtmamba {

class GradTape;

/// Handle to a value recorded on a GradTape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  GradTape& tape() const;
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class GradTape;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered registry of named learnable tensors.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor init);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t index) const { return names_.at(index); }
  const Tensor& value(std::size_t index) const { return values_.at(index); }
  Tensor& value(std::size_t index) { return values_.at(index); }
  std::optional<std::size_t> find(const std::string& name) const;

  /// Total number of scalar entries across all parameters.
  std::size_t entry_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// One adjoint tensor per parameter, aligned with a ParameterStore.
using Gradients = std::vector<Tensor>;

Gradients zero_gradients(const ParameterStore& store);
void add_into(Gradients& into, const Gradients& from, double scale = 1.0);

/// Reverse-mode tape. Forward ops append nodes; backward() walks them in
/// reverse and accumulates adjoints. A tape is single-threaded; use one tape
/// per thread.
class GradTape {
 public:
  /// Called with the node's output adjoint; pushes contributions into inputs
  /// through sink().
  using BackwardFn = std::function<void(GradTape&, const Tensor&)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to store entry `index`; repeated requests return the same node.
  Var parameter(const ParameterStore& store, std::size_t index);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const;

  /// Adjoint buffer of `v`, allocated on first use; nullptr for constants.
  Tensor* sink(Var v);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws if called twice
  /// without new operations recorded in between.
  void backward(Var loss);

  /// Adjoint of `v` after backward(); zeros if `v` was not reached.
  Tensor grad(Var v) const;

  Gradients parameter_grads(const ParameterStore& store) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> param_nodes_;  // store index -> node id + 1
  const ParameterStore* store_ = nullptr;
  bool backward_done_ = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
};

/// Scalar loss built on a fresh tape from parameters in the store.
using LossBuilder = std::function<Var(GradTape&, const ParameterStore&)>;

/// Compares tape adjoints against central differences for every entry of the
/// selected parameters (all when `only` is empty). Error per entry is
/// |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const LossBuilder& loss, ParameterStore& store,
                           double step = 1e-5,
                           const std::vector<std::string>& only = {});

}  // namespace dtmamba
