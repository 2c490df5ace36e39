#pragma once

// Parameter registry, the few layers the encoders/decoders/predictors are
// built from, and the Adam optimizer with global-norm clipping.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bevflow/core/rng.hpp"
#include "bevflow/core/tensor.hpp"

namespace bevflow {

// Named trainable tensors in creation order. Creation order is the
// checkpoint order, so building the same modules from the same seed gives
// byte-identical checkpoints.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& create(const std::string& name, Shape shape, const std::string& role = "weight") {
    if (params_.count(name)) throw std::invalid_argument("param '" + name + "' already exists");
    order_.push_back(name);
    roles_[name] = role;
    auto [it, ok] = params_.emplace(name, Tensor<T>::zeros(std::move(shape), true));
    (void)ok;
    return it->second;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("param '" + name + "' not found");
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("param '" + name + "' not found");
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  const std::string& role(const std::string& name) const { return roles_.at(name); }
  size_t size() const { return order_.size(); }

  void zero_grad() {
    for (auto& name : order_) params_.at(name).zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (auto& name : order_) n += params_.at(name).numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, std::string> roles_;
};

namespace init {

// uniform in +-sqrt(6/(fan_in+fan_out))
template <typename T>
void glorot(Tensor<T>& w, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void normal(Tensor<T>& w, double stddev, Rng& rng) {
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, stddev));
}

}  // namespace init

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng)
      : w_(&store.create(prefix + ".w", {in, out})), b_(&store.create(prefix + ".b", {out}, "bias")) {
    init::glorot(*w_, in, out, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, *w_), *b_); }

  Tensor<T>& weight() { return *w_; }
  Tensor<T>& bias() { return *b_; }
  int in_features() const { return w_->dim(0); }
  int out_features() const { return w_->dim(1); }

 private:
  Tensor<T>* w_ = nullptr;
  Tensor<T>* b_ = nullptr;
};

// relu MLP; sizes = {in, hidden..., out}
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& prefix, std::vector<int> sizes, Rng& rng) {
    if (sizes.size() < 2) throw std::invalid_argument("mlp: need at least in/out sizes");
    for (size_t i = 0; i + 1 < sizes.size(); ++i)
      layers_.emplace_back(store, prefix + ".l" + std::to_string(i), sizes[i], sizes[i + 1], rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

 private:
  std::vector<Linear<T>> layers_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim)
      : gamma_(&store.create(prefix + ".gamma", {dim}, "norm")), beta_(&store.create(prefix + ".beta", {dim}, "norm")) {
    for (int64_t i = 0; i < gamma_->numel(); ++i) (*gamma_)[i] = T(1);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add_row(mul_row(layernorm_lastdim(x), *gamma_), *beta_);
  }

 private:
  Tensor<T>* gamma_ = nullptr;
  Tensor<T>* beta_ = nullptr;
};

// Clips gradients to a global L2 norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& name : store.names()) {
    const auto& g = store.get(name).grad();
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& name : store.names()) {
      auto& p = store.get(name);
      auto gh = p.grad_handle();
      for (auto& v : *gh) v *= s;
    }
  }
  return norm;
}

template <typename T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore<T>& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& name : store.names()) {
      auto& p = store.get(name);
      auto& m = state_m_[name];
      auto& v = state_v_[name];
      if (m.empty()) {
        m.assign(static_cast<size_t>(p.numel()), 0.0);
        v.assign(static_cast<size_t>(p.numel()), 0.0);
      }
      const auto& g = p.grad();
      const bool decay = weight_decay_ > 0.0 && store.role(name) == "weight";
      for (int64_t i = 0; i < p.numel(); ++i) {
        double gi = static_cast<double>(g[static_cast<size_t>(i)]);
        if (decay) gi += weight_decay_ * static_cast<double>(p[i]);
        m[static_cast<size_t>(i)] = beta1_ * m[static_cast<size_t>(i)] + (1.0 - beta1_) * gi;
        v[static_cast<size_t>(i)] = beta2_ * v[static_cast<size_t>(i)] + (1.0 - beta2_) * gi * gi;
        const double mhat = m[static_cast<size_t>(i)] / bc1;
        const double vhat = v[static_cast<size_t>(i)] / bc2;
        p[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> state_m_, state_v_;
};

}  // namespace bevflow
