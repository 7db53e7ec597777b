#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bsatnp/tensor.hpp"

namespace bsatnp {

// Named learnable tensors with matching gradient slots. Iteration order is
// insertion order, so two stores built by the same sequence of add() calls
// line up index by index.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> init) {
    if (index_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
    const std::size_t i = names_.size();
    grads_.emplace_back(init.shape());
    values_.push_back(std::move(init));
    index_.emplace(name, i);
    names_.push_back(std::move(name));
    return i;
  }

  std::size_t size() const noexcept { return names_.size(); }
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  Tensor<T>& value(std::string_view name) { return values_[index(name)]; }
  const Tensor<T>& value(std::string_view name) const { return values_[index(name)]; }
  Tensor<T>& grad(std::size_t i) { return grads_.at(i); }
  const Tensor<T>& grad(std::size_t i) const { return grads_.at(i); }
  Tensor<T>& grad(std::string_view name) { return grads_[index(name)]; }
  const Tensor<T>& grad(std::string_view name) const { return grads_[index(name)]; }

  void zero_grad() {
    for (auto& g : grads_) g.fill(T{0});
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace bsatnp
