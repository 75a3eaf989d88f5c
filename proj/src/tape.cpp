#include "dtmamba/tape.hpp"

#include <algorithm>
#include <cmath>

#include "dtmamba/errors.hpp"

namespace dtmamba {

GradTape& Var::tape() const {
  if (!tape_) throw Error("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

std::size_t ParameterStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterStore::find(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t ParameterStore::entry_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Gradients zero_gradients(const ParameterStore& store) {
  Gradients g;
  g.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    g.emplace_back(store.value(i).shape());
  }
  return g;
}

void add_into(Gradients& into, const Gradients& from, double scale) {
  if (into.size() != from.size()) {
    throw DimensionError("gradient sets of different length");
  }
  for (std::size_t p = 0; p < into.size(); ++p) {
    auto dst = into[p].values();
    auto src = from[p].values();
    if (dst.size() != src.size()) {
      throw DimensionError("gradient shape mismatch at parameter " +
                           std::to_string(p));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

void GradTape::check_owner(Var v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw Error("Var does not belong to this tape");
  }
}

Var GradTape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  backward_done_ = false;
  return Var(this, nodes_.size() - 1);
}

Var GradTape::parameter(const ParameterStore& store, std::size_t index) {
  if (store_ && store_ != &store) {
    throw Error("a tape can bind parameters from one store only");
  }
  store_ = &store;
  if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), 0);
  if (param_nodes_.at(index) != 0) return Var(this, param_nodes_[index] - 1);
  nodes_.push_back(Node{store.value(index), {}, {}, true});
  backward_done_ = false;
  param_nodes_[index] = nodes_.size();
  return Var(this, nodes_.size() - 1);
}

Var GradTape::record(Tensor value, std::span<const Var> inputs,
                     BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(
      Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{},
           needs});
  backward_done_ = false;
  return Var(this, nodes_.size() - 1);
}

Var GradTape::record(Tensor value, std::initializer_list<Var> inputs,
                     BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

bool GradTape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

Tensor* GradTape::sink(Var v) {
  check_owner(v);
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return &n.grad;
}

void GradTape::backward(Var loss) {
  check_owner(loss);
  if (backward_done_) {
    throw Error("backward() called twice without a new forward pass");
  }
  if (nodes_[loss.id()].value.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " +
                         shape_str(nodes_[loss.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (Tensor* seed = sink(loss)) (*seed)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // The callback may touch other nodes' grads; keep a copy of this one.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
  backward_done_ = true;
}

Tensor GradTape::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

Gradients GradTape::parameter_grads(const ParameterStore& store) const {
  Gradients out = zero_gradients(store);
  if (store_ && store_ != &store) {
    throw Error("parameter_grads() for a store this tape never bound");
  }
  for (std::size_t p = 0; p < std::min(param_nodes_.size(), out.size()); ++p) {
    if (param_nodes_[p] == 0) continue;
    const Node& n = nodes_[param_nodes_[p] - 1];
    if (!n.grad.empty()) out[p] = n.grad;
  }
  return out;
}

void GradTape::clear() {
  nodes_.clear();
  param_nodes_.clear();
  store_ = nullptr;
  backward_done_ = false;
}

GradCheckResult grad_check(const LossBuilder& loss, ParameterStore& store,
                           double step, const std::vector<std::string>& only) {
  Gradients analytic;
  {
    GradTape tape;
    Var l = loss(tape, store);
    tape.backward(l);
    analytic = tape.parameter_grads(store);
  }
  auto eval = [&]() {
    GradTape tape;
    return loss(tape, store).value().item();
  };

  GradCheckResult result;
  for (std::size_t p = 0; p < store.size(); ++p) {
    if (!only.empty() &&
        std::find(only.begin(), only.end(), store.name(p)) == only.end()) {
      continue;
    }
    Tensor& value = store.value(p);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = eval();
      value[i] = saved - step;
      const double down = eval();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        throw NumericError("non-finite gradient for " + store.name(p) + "[" +
                           std::to_string(i) + "]");
      }
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++result.entries_checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = store.name(p);
        result.worst_entry = i;
      }
    }
  }
  return result;
}

}  // namespace dtmamba
