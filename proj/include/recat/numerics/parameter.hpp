#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "recat/error.hpp"
#include "recat/numerics/tensor.hpp"

namespace recat {

/// A named trainable tensor and its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), T(0)) {}
};

/// Owns parameters in insertion order.  Addresses stay stable for the
/// lifetime of the set, so layers keep raw `Parameter*` handles.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  /// Adds a parameter drawn from N(0, stddev^2).
  Parameter<T>& add_normal(const std::string& name, std::vector<std::size_t> shape, double stddev,
                           std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
    return add(name, std::move(t));
  }

  Parameter<T>& add_constant(const std::string& name, std::vector<std::size_t> shape, T fill) {
    return add(name, Tensor<T>(std::move(shape), fill));
  }

  Parameter<T>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter<T>& at(std::string_view name) {
    auto* p = find(name);
    if (!p) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return *p;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace recat
