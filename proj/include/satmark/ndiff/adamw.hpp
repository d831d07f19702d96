#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "satmark/ndiff/tensor.hpp"

namespace satmark::ndiff {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam with bias correction.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<TensorF*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      first_.push_back(ArrayX<float>::Zero(p->numel()));
      second_.push_back(ArrayX<float>::Zero(p->numel()));
    }
  }

  // Applies one update from the gradients stored on the parameters. Throws
  // NumericError before touching any parameter if a gradient is non-finite.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto* p = params_[i];
      if (p->grad && p->grad->size() != p->numel())
        throw DimensionError("adamw: gradient shape mismatch for parameter " + std::to_string(i));
      if (p->grad && !p->grad->isFinite().all())
        throw NumericError("adamw: non-finite gradient for parameter " + std::to_string(i) + "; update rejected");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      TensorF& p = *params_[i];
      const ArrayX<float> g = p.grad ? *p.grad : ArrayX<float>::Zero(p.numel());
      first_[i] = b1 * first_[i] + (1.0f - b1) * g;
      second_[i] = b2 * second_[i] + (1.0f - b2) * g.square();
      const ArrayX<float> m_hat = first_[i] / static_cast<float>(bc1);
      const ArrayX<float> v_hat = second_[i] / static_cast<float>(bc2);
      if (cfg_.weight_decay != 0.0) p.data *= decay;
      p.data -= static_cast<float>(cfg_.lr) * m_hat / (v_hat.sqrt() + static_cast<float>(cfg_.eps));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->grad.reset();
  }

  long long step_count() const { return step_; }
  void set_step_count(long long s) { step_ = s; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<ArrayX<float>>& first_moments() { return first_; }
  std::vector<ArrayX<float>>& second_moments() { return second_; }
  const std::vector<ArrayX<float>>& first_moments() const { return first_; }
  const std::vector<ArrayX<float>>& second_moments() const { return second_; }

 private:
  std::vector<TensorF*> params_;
  std::vector<ArrayX<float>> first_, second_;
  long long step_ = 0;
  AdamWConfig cfg_;
};

}  // namespace satmark::ndiff
