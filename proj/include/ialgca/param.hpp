#pragma once

#include <map>
#include <string>
#include <vector>

#include "ialgca/tape.hpp"

namespace ialgca {

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  bool trainable = true;
};

// Named parameter registry. Binding pushes every parameter onto a fresh tape
// in registration order, so parameter i always owns node id i.
template <class S>
class ParamSet {
 public:
  int add(std::string name, Tensor<S> value, bool trainable = true) {
    if (index_.count(name))
      throw ContractError(cat("parameter '", name, "' registered twice"));
    index_[name] = static_cast<int>(items_.size());
    items_.push_back({std::move(name), std::move(value), trainable});
    return static_cast<int>(items_.size()) - 1;
  }

  int size() const { return static_cast<int>(items_.size()); }
  Parameter<S>& operator[](int i) { return items_[static_cast<size_t>(i)]; }
  const Parameter<S>& operator[](int i) const { return items_[static_cast<size_t>(i)]; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[static_cast<size_t>(it->second)];
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[static_cast<size_t>(it->second)];
  }

  std::vector<Val<S>> bind(Tape<S>& tape) const {
    if (tape.size() != 0)
      throw ContractError("bind: parameters must be the first nodes on a tape");
    std::vector<Val<S>> vals;
    vals.reserve(items_.size());
    for (const auto& p : items_) vals.push_back({&tape, tape.leaf(p.value)});
    return vals;
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
  }

  template <class T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& p : items_) out.add(p.name, p.value.template cast<T>(), p.trainable);
    return out;
  }

 private:
  std::vector<Parameter<S>> items_;
  std::map<std::string, int> index_;
};

// theta <- theta - lr * g for every trainable parameter. grads are aligned
// with bind() order (node id == parameter index).
template <class S>
void sgd_step(ParamSet<S>& params, const std::vector<Tensor<S>>& grads, double lr) {
  if (lr <= 0) throw ContractError(cat("sgd_step: lr must be positive, got ", lr));
  if (static_cast<int>(grads.size()) < params.size())
    throw ContractError("sgd_step: gradient list shorter than parameter list");
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    const Tensor<S>& g = grads[static_cast<size_t>(i)];
    if (g.data.size() == 0 || !g.same_shape(p.value))
      throw ContractError(cat("sgd_step: missing or misshaped gradient for '", p.name, "'"));
    p.value.data -= static_cast<S>(lr) * g.data;
  }
}

}  // namespace ialgca
