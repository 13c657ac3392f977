// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "astro/error.hpp"
#include "astro/tensor.hpp"

namespace astro {

struct RAdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;  // decoupled
};

/// Rectified Adam. When the variance rectification term rho_t is at most 4
/// the step falls back to bias-corrected momentum.
template <class T>
class RAdam {
 public:
  RAdam(NamedTensors<T> params, RAdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1))
      throw ConfigError("RAdam betas must be in [0, 1)");
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor->shape(), T(0));
      v_.emplace_back(p.tensor->shape(), T(0));
    }
  }

  std::size_t step_count() const noexcept { return t_; }
  const NamedTensors<T>& params() const noexcept { return params_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  /// rho_t for step t (1-based).
  static double rho(double beta2, std::size_t t) {
    const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    const double b2t = std::pow(beta2, static_cast<double>(t));
    return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
  }

  /// One update with gradients aligned to params(). Nothing is modified if
  /// any gradient is non-finite.
  void step(const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != params_.size()) throw ContractError("RAdam: gradient count does not match parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != params_[i].tensor->shape())
        throw ShapeError("RAdam: gradient of " + params_[i].name + " has shape " + to_string(grads[i].shape()));
      if (!grads[i].all_finite()) throw NonFiniteError("RAdam: non-finite gradient for " + params_[i].name);
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho(b2, t_);
    const bool adaptive = rho_t > 4.0;
    const double r = adaptive ? std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                          ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                              : 0.0;
    const double decay = 1.0 - lr * cfg_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i].tensor;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
        const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double pj = static_cast<double>(p[j]);
        if (cfg_.weight_decay != 0.0) pj *= decay;
        const double mhat = mj / bc1;
        if (adaptive)
          pj -= lr * r * mhat / (std::sqrt(vj / bc2) + cfg_.eps);
        else
          pj -= lr * mhat;
        p[j] = static_cast<T>(pj);
      }
    }
  }

 private:
  NamedTensors<T> params_;
  RAdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Slow weights pulled toward the fast weights every k inner steps.
template <class T>
class Lookahead {
 public:
  Lookahead(NamedTensors<T> params, std::size_t k = 5, double alpha = 0.5)
      : params_(std::move(params)), k_(k), alpha_(alpha) {
    if (k_ == 0) throw ConfigError("lookahead k must be positive");
    if (!(alpha_ >= 0.0 && alpha_ <= 1.0)) throw ConfigError("lookahead alpha must be in [0, 1]");
    for (const auto& p : params_) slow_.push_back(*p.tensor);
  }

  const std::vector<Tensor<T>>& slow() const noexcept { return slow_; }

  /// Counts one inner step and syncs when the count reaches a multiple of k.
  void after_step() {
    if (++count_ % k_ == 0) sync();
  }

  /// slow <- slow + alpha (fast - slow); fast <- slow.
  void sync() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& fast = *params_[i].tensor;
      auto& s = slow_[i];
      for (std::size_t j = 0; j < fast.size(); ++j) {
        const double sj = static_cast<double>(s[j]) + alpha_ * (static_cast<double>(fast[j]) - static_cast<double>(s[j]));
        s[j] = static_cast<T>(sj);
        fast[j] = s[j];
      }
    }
  }

 private:
  NamedTensors<T> params_;
  std::size_t k_;
  double alpha_;
  std::vector<Tensor<T>> slow_;
  std::size_t count_ = 0;
};

/// Linear warmup from warmup_lr (step 0) to base_lr (last warmup step), then
/// cosine decay from base_lr (first post-warmup step) to min_lr (last step).
struct Schedule {
  double base_lr = 2e-5;
  double warmup_lr = 1e-5;
  double min_lr = 0.0;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 300;
  std::size_t steps_per_epoch = 1;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }

  void validate() const {
    if (steps_per_epoch == 0) throw ConfigError("steps per epoch must be positive");
    if (total_epochs == 0) throw ConfigError("epochs must be positive");
    if (warmup_epochs >= total_epochs)
      throw ConfigError("warmup epochs (" + std::to_string(warmup_epochs) + ") must be fewer than total epochs (" +
                        std::to_string(total_epochs) + ")");
    if (!(base_lr > 0 && warmup_lr > 0 && min_lr >= 0)) throw ConfigError("learning rates must be positive");
  }

  double lr_at(std::size_t step) const {
    const std::size_t W = warmup_steps(), N = total_steps();
    if (step >= N) throw ContractError("lr_at: step " + std::to_string(step) + " beyond " + std::to_string(N) + " steps");
    if (step < W) {
      if (step == 0) return warmup_lr;
      if (step + 1 == W) return base_lr;
      return warmup_lr + (base_lr - warmup_lr) * static_cast<double>(step) / static_cast<double>(W - 1);
    }
    const std::size_t span = N - W - 1;
    const double progress = span == 0 ? 1.0 : static_cast<double>(step - W) / static_cast<double>(span);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

}  // namespace astro
