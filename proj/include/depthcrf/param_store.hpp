#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "depthcrf/rng.hpp"
#include "depthcrf/tensor.hpp"

namespace depthcrf {

/// Named registry of trainable leaves. Initialization draws from a stream
/// seeded by (seed, name), so adding or removing one module never perturbs
/// the values of another.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  Tensor<T>& normal(const std::string& name, Shape shape, T stddev) {
    auto rng = named_rng(seed_, name);
    Tensor<T> t = Tensor<T>::randn(std::move(shape), rng, stddev);
    return insert(name, std::move(t));
  }

  Tensor<T>& zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor<T>::zeros(std::move(shape)));
  }

  Tensor<T>& constant(const std::string& name, Shape shape, T v) {
    return insert(name, Tensor<T>::filled(std::move(shape), v));
  }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  std::uint64_t seed() const { return seed_; }

 private:
  Tensor<T>& insert(const std::string& name, Tensor<T> t) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

}  // namespace depthcrf
