#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "affetto/autodiff.hpp"

namespace affetto {

template <typename T>
struct ParamT {
  std::string name;
  VarT<T> var;
};

using Param = ParamT<float>;

struct AdamConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class AdamT {
 public:
  explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t step_count() const { return step_; }

  // One update over all params with gradients. Throws on non-finite
  // gradients, leaving params and state untouched.
  void step(std::vector<ParamT<T>>& params) {
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const auto& p : params) {
        m_.push_back(TensorT<T>::zeros(p.var.val().shape));
        v_.push_back(TensorT<T>::zeros(p.var.val().shape));
      }
    }
    if (m_.size() != params.size())
      throw std::invalid_argument("adam: parameter list changed size mid-run");

    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (T g : p.var.grad().v) {
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("adam: non-finite gradient in '" + p.name + "'");
      }
    }

    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.var.requires_grad()) continue;
      auto& value = p.var.mutable_val();
      const T* g = p.var.has_grad() ? p.var.grad().v.data() : nullptr;
      for (size_t j = 0; j < value.v.size(); ++j) {
        double gj = g ? static_cast<double>(g[j]) : 0.0;
        double m = cfg_.beta1 * m_[i].v[j] + (1.0 - cfg_.beta1) * gj;
        double v = cfg_.beta2 * v_[i].v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m_[i].v[j] = static_cast<T>(m);
        v_[i].v[j] = static_cast<T>(v);
        double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        value.v[j] = static_cast<T>(value.v[j] - update);
      }
    }
  }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::vector<TensorT<T>> m_, v_;
};

using Adam = AdamT<float>;

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the observed pre-clip norm.
template <typename T>
double clip_grad_norm(std::vector<ParamT<T>>& params, double max_norm = 1.0) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (T g : p.var.grad().v) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (T& g : p.var.ensure_grad().v) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

template <typename T>
void zero_grads(std::vector<ParamT<T>>& params) {
  for (auto& p : params) p.var.clear_grad();
}

}  // namespace affetto
