#pragma once

// Parameter registry and the small layer building blocks shared by the
// signal tower, text tower and captioning decoder.

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "esi/autograd.hpp"

namespace esi {

template <typename T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  bool decay = true;  // receives decoupled weight decay
};

// Ordered, named set of trainable leaves. Registration order is the
// canonical order for optimizers and checkpoints.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init, bool decay) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>(std::move(init), true), decay});
    return entries_.back().var;
  }

  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::vector<ParamEntry<T>>& entries() { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].var;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  // Toggles requires_grad for every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) e.var.set_requires_grad(trainable);
  }

  int64_t count(const std::string& prefix = "") const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.var.value().numel();
    return n;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, size_t> index_;
};

// Initializers draw in double so float and double models built from the same
// seed hold the same values up to rounding.
class Initializer {
 public:
  explicit Initializer(uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> truncated_normal(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : t.data) {
      double z;
      do {
        z = normal(rng_);
      } while (std::abs(z) > 2.0);
      v = static_cast<T>(z * stddev);
    }
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kNormEps = 1e-6;

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out, Initializer& init,
         bool with_bias = true) {
    weight = ps.add(name + ".weight", init.truncated_normal<T>({in, out}, kInitStd), true);
    if (with_bias) bias = ps.add(name + ".bias", Tensor<T>({out}), false);
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  static int64_t param_count(int64_t in, int64_t out, bool with_bias = true) {
    return in * out + (with_bias ? out : 0);
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int64_t width) {
    gamma = ps.add(name + ".gamma", Tensor<T>({width}, T(1)), false);
    beta = ps.add(name + ".beta", Tensor<T>({width}), false);
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::layer_norm(x, gamma, beta, static_cast<T>(kNormEps));
  }

  static int64_t param_count(int64_t width) { return 2 * width; }
};

// Projections around ops::attention. Keys/values may come from a sequence of
// a different width (cross-attention).
template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, int64_t width, int64_t kv_width,
                     int n_heads, Initializer& init)
      : q(ps, name + ".q", width, width, init),
        k(ps, name + ".k", kv_width, width, init),
        v(ps, name + ".v", kv_width, width, init),
        out(ps, name + ".out", width, width, init),
        heads(n_heads) {
    if (width % n_heads != 0) {
      throw std::invalid_argument(name + ": width " + std::to_string(width) +
                                  " not divisible by heads " + std::to_string(n_heads));
    }
  }

  Var<T> operator()(const Var<T>& query, const Var<T>& context,
                    const std::vector<uint8_t>* key_valid, bool causal) const {
    return out(ops::attention(q(query), k(context), v(context), heads, key_valid, causal));
  }

  static int64_t param_count(int64_t width, int64_t kv_width) {
    return 2 * Linear<T>::param_count(width, width) + 2 * Linear<T>::param_count(kv_width, width);
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, int64_t width, int64_t hidden, Initializer& init)
      : fc1(ps, name + ".fc1", width, hidden, init), fc2(ps, name + ".fc2", hidden, width, init) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ops::gelu(fc1(x))); }

  static int64_t param_count(int64_t width, int64_t hidden) {
    return Linear<T>::param_count(width, hidden) + Linear<T>::param_count(hidden, width);
  }
};

}  // namespace esi
