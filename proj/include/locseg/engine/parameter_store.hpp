#ifndef LOCSEG_ENGINE_PARAMETER_STORE_HPP
#define LOCSEG_ENGINE_PARAMETER_STORE_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "locseg/engine/rng.hpp"
#include "locseg/engine/tensor.hpp"

namespace locseg {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> accumulator;  // RMSPROP running mean of squared gradients
};

/// Ordered, named parameters with shape-matched gradient and accumulator tensors.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, const Shape& shape) {
    params_.push_back({std::move(name), Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw std::out_of_range("parameter store: no parameter named " + name);
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T{0});
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      const std::size_t i = out.add(p.name, p.value.shape());
      out[i].value = p.value.template cast<U>();
      out[i].accumulator = p.accumulator.template cast<U>();
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
};

struct RmspropConfig {
  double learning_rate = 1e-3;
  double decay = 0.9;
  double epsilon = 1e-8;
};

inline void validate(const RmspropConfig& c) {
  if (!(c.learning_rate > 0.0)) throw std::invalid_argument("rmsprop: learning rate must be positive");
  if (!(c.decay >= 0.0 && c.decay < 1.0)) throw std::invalid_argument("rmsprop: decay must lie in [0, 1)");
  if (!(c.epsilon >= 0.0)) throw std::invalid_argument("rmsprop: epsilon must be non-negative");
}

/// r <- rho*r + (1-rho)*g^2 ; w <- w - lr*g/sqrt(r+eps) ; g <- 0
template <typename T>
void rmsprop_step(ParameterStore<T>& store, const RmspropConfig& config) {
  validate(config);
  const T lr = static_cast<T>(config.learning_rate);
  const T rho = static_cast<T>(config.decay);
  const T one_minus_rho = static_cast<T>(1.0 - config.decay);
  const T eps = static_cast<T>(config.epsilon);
  for (auto& p : store) {
    T* w = p.value.data();
    T* g = p.grad.data();
    T* r = p.accumulator.data();
    for (std::size_t i = 0, n = p.value.size(); i < n; ++i) {
      r[i] = rho * r[i] + one_minus_rho * g[i] * g[i];
      w[i] -= lr * g[i] / std::sqrt(r[i] + eps);
      g[i] = T{0};
    }
  }
}

/// Glorot/Xavier uniform limit sqrt(6 / (fan_in + fan_out)).
inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("glorot_init: fans must be positive");
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
Tensor<T> glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
  const double limit = glorot_limit(fan_in, fan_out);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_PARAMETER_STORE_HPP
