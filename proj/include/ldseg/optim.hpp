#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ldseg/autodiff.hpp"
#include "ldseg/tensor.hpp"

namespace ldseg {

// One trainable tensor plus its gradient and Adam moments. Moments live here
// so checkpointing the store captures the whole training state.
template <typename S>
struct ParamT {
  TensorT<S> value;
  TensorT<S> grad;
  TensorT<S> m;
  TensorT<S> v;

  ParamT() = default;
  explicit ParamT(TensorT<S> init)
      : value(std::move(init)), grad(value.shape), m(value.shape), v(value.shape) {}
};

// Named parameter collection. std::map keeps iteration order sorted by name,
// which makes optimizer updates and serialization deterministic.
template <typename S>
class ParamStoreT {
public:
  std::int64_t opt_steps = 0;  // Adam step counter, saved/restored with the store

  ParamT<S>& add(const std::string& name, TensorT<S> init) {
    auto [it, inserted] = params_.emplace(name, ParamT<S>(std::move(init)));
    if (!inserted) throw value_error("parameter already registered: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  ParamT<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw value_error("unknown parameter: " + name);
    return it->second;
  }
  const ParamT<S>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw value_error("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, ParamT<S>>& entries() { return params_; }
  const std::map<std::string, ParamT<S>>& entries() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& kv : params_) out.push_back(kv.first);
    return out;
  }

  std::size_t count() const { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& kv : params_) n += kv.second.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& kv : params_) kv.second.grad.fill(S(0));
  }

  template <typename U>
  ParamStoreT<U> cast() const {
    ParamStoreT<U> out;
    out.opt_steps = opt_steps;
    for (const auto& kv : params_) {
      ParamT<U> p(kv.second.value.template cast<U>());
      p.grad = kv.second.grad.template cast<U>();
      p.m = kv.second.m.template cast<U>();
      p.v = kv.second.v.template cast<U>();
      out.entries().emplace(kv.first, std::move(p));
    }
    return out;
  }

private:
  std::map<std::string, ParamT<S>> params_;
};

using Param = ParamT<float>;
using ParamStore = ParamStoreT<float>;

// Binds store parameters onto a tape as leaves, one node per name, and flushes
// tape gradients back into the store after backward.
template <typename S>
class TapeParams {
public:
  TapeParams(Tape<S>& tape, ParamStoreT<S>& store) : tape_(&tape), store_(&store) {}

  Var<S> operator[](const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Var<S>(tape_, it->second);
    ParamT<S>& p = store_->at(name);
    const int id = tape_->leaf(p.value, true);
    bound_.emplace(name, id);
    return Var<S>(tape_, id);
  }

  // Accumulate tape gradients into the store (+=, so micro-batches can sum).
  void flush_grads() {
    for (const auto& kv : bound_) {
      if (!tape_->grad_touched(kv.second)) continue;
      ad::accumulate(store_->at(kv.first).grad, tape_->node(kv.second).grad);
    }
  }

private:
  Tape<S>* tape_;
  ParamStoreT<S>* store_;
  std::map<std::string, int> bound_;
};

// Bias-corrected Adam over every parameter in the store. Element math runs in
// double so float and double stores follow the same trajectory.
template <typename S>
void adam_step(ParamStoreT<S>& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  store.opt_steps += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(store.opt_steps));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(store.opt_steps));
  for (auto& kv : store.entries()) {
    ParamT<S>& p = kv.second;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]);
      const double m = beta1 * static_cast<double>(p.m.data[i]) + (1.0 - beta1) * g;
      const double v = beta2 * static_cast<double>(p.v.data[i]) + (1.0 - beta2) * g * g;
      p.m.data[i] = static_cast<S>(m);
      p.v.data[i] = static_cast<S>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p.value.data[i] =
          static_cast<S>(static_cast<double>(p.value.data[i]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

}  // namespace ldseg
