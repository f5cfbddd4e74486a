#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "fortress/autograd.hpp"
#include "fortress/errors.hpp"
#include "fortress/rng.hpp"

namespace fortress {

/// Non-trainable named state (BatchNorm running statistics).
template <Scalar T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Insertion-ordered owner of every parameter and buffer of a model.
/// Element addresses are stable, so blocks keep raw pointers into it.
template <Scalar T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    claim(name);
    return params_.emplace_back(name, std::move(value));
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> value) {
    claim(name);
    return buffers_.emplace_back(Buffer<T>{name, std::move(value)}).value;
  }

  std::deque<Parameter<T>>& params() { return params_; }
  const std::deque<Parameter<T>>& params() const { return params_; }
  std::deque<Buffer<T>>& buffers() { return buffers_; }
  const std::deque<Buffer<T>>& buffers() const { return buffers_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Every tensor (parameters then buffers) by name, in store order.
  std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (const auto& p : params_) out.emplace_back(p.name, &p.value);
    for (const auto& b : buffers_) out.emplace_back(b.name, &b.value);
    return out;
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) out.push_back(p.value);
    for (const auto& b : buffers_) out.push_back(b.value);
    return out;
  }

  void restore(const std::vector<Tensor<T>>& state) {
    if (state.size() != params_.size() + buffers_.size()) throw ConfigError("snapshot does not match parameter store");
    std::size_t i = 0;
    for (auto& p : params_) p.value = state[i++];
    for (auto& b : buffers_) b.value = state[i++];
  }

 private:
  void claim(const std::string& name) {
    if (!names_.emplace(name, true).second) throw ConfigError("duplicate parameter name " + name);
  }

  std::deque<Parameter<T>> params_;
  std::deque<Buffer<T>> buffers_;
  std::unordered_map<std::string, bool> names_;
};

namespace init {

/// Entries drawn from N(0, variance).
template <Scalar T>
Tensor<T> normal(Shape s, double variance, Rng& rng) {
  Tensor<T> t(s);
  const double sd = std::sqrt(variance);
  for (T& v : t.span()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <Scalar T>
Tensor<T> uniform(Shape s, double lo, double hi, Rng& rng) {
  Tensor<T> t(s);
  for (T& v : t.span()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Depthwise k x k kernel law: N(0, 2 / (k^2 * C_in)).
template <Scalar T>
Tensor<T> depthwise(std::size_t c_in, std::size_t k, Rng& rng) {
  return normal<T>({c_in, 1, k, k}, 2.0 / static_cast<double>(k * k * c_in), rng);
}

/// Pointwise 1 x 1 law: N(0, 2 / (C_in + C_out)).
template <Scalar T>
Tensor<T> pointwise(std::size_t c_in, std::size_t c_out, Rng& rng) {
  return normal<T>({c_out, c_in, 1, 1}, 2.0 / static_cast<double>(c_in + c_out), rng);
}

}  // namespace init
}  // namespace fortress
