#pragma once

#include "easyfirst/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace easyfirst {

enum class Init { zeros, ones, xavier_uniform };

/// Ordered registry of named trainable tensors.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  /// Registers a parameter. Xavier bounds use the first extent as fan-in and
  /// the remaining extents as fan-out.
  Tensor<T> add(std::string name, Shape shape, Init init) {
    for (const auto& [existing, _] : entries_) {
      if (existing == name) throw ConfigError("duplicate parameter name " + name);
    }
    const auto n = element_count(shape);
    std::vector<T> values(n, T{0});
    if (init == Init::ones) {
      std::fill(values.begin(), values.end(), T{1});
    } else if (init == Init::xavier_uniform) {
      const double fan_in = static_cast<double>(shape.front());
      const double fan_out = static_cast<double>(n) / fan_in;
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : values) v = static_cast<T>(dist(rng_));
    }
    Tensor<T> t(std::move(shape), std::move(values), true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw ConfigError("unknown parameter " + name);
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::mt19937_64 rng_;
};

}  // namespace easyfirst
