#pragma once

#include <cmath>
#include <vector>

#include "engram/tensor.hpp"

namespace engram {

template <typename T>
struct AdamWConfig {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);
  int warmup_steps = 0;  // linear learning-rate ramp over this many steps
  T clip = T(0);         // global grad-norm ceiling, 0 disables clipping
};

// Decoupled-weight-decay Adam with bias correction. Parameters whose grad was
// never populated in the current accumulation window are skipped entirely:
// no moment update and no decay.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>*> params, AdamWConfig<T> cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i]->numel()), T(0));
      v_[i].assign(static_cast<size_t>(params_[i]->numel()), T(0));
    }
  }

  // Clips, updates, advances the step counter. Returns the pre-clip global
  // gradient norm.
  T step() {
    ++step_;
    T norm_sq = T(0);
    for (auto* p : params_) {
      if (!p->has_grad()) continue;
      for (T g : p->grad()) norm_sq += g * g;
    }
    const T norm = std::sqrt(norm_sq);
    T grad_scale = T(1);
    if (cfg_.clip > T(0) && norm > cfg_.clip) grad_scale = cfg_.clip / norm;
    const T lr = current_lr();
    const T bc1 = T(1) - std::pow(cfg_.beta1, T(step_));
    const T bc2 = T(1) - std::pow(cfg_.beta2, T(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>* p = params_[i];
      if (!p->has_grad()) continue;
      auto& grad = p->grad();
      auto& data = p->data();
      for (size_t j = 0; j < grad.size(); ++j) {
        const T g = grad[j] * grad_scale;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (T(1) - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (T(1) - cfg_.beta2) * g * g;
        const T mhat = m_[i][j] / bc1;
        const T vhat = v_[i][j] / bc2;
        data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * data[j]);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  int64_t steps() const { return step_; }

  // learning rate the most recent step used (or the next one will, pre-step)
  T current_lr() const {
    if (cfg_.warmup_steps <= 0) return cfg_.lr;
    const int64_t t = step_ == 0 ? 1 : step_;
    return t >= cfg_.warmup_steps ? cfg_.lr : cfg_.lr * T(t) / T(cfg_.warmup_steps);
  }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamWConfig<T> cfg_;
  int64_t step_ = 0;
};

}  // namespace engram
