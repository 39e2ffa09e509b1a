#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "duovid/nn.hpp"

namespace duovid {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
};

// Linear warmup, then cosine decay from base to min_lr over the remaining steps.
struct CosineSchedule {
  double base = 1e-3;
  double min_lr = 0.0;
  std::size_t warmup = 0;
  std::size_t total = 1;

  double at(std::size_t step) const {
    if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const std::size_t span = total > warmup ? total - warmup : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

// AdamW over a fixed parameter list. The list is taken at construction and
// every step re-checks that its members are still trainable.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  // Optimizer over every currently trainable parameter of a set.
  static AdamW over_trainable(const ParamSet<T>& set, AdamWConfig config) {
    std::vector<Parameter<T>> chosen;
    for (const auto& p : set.all())
      if (p.var.requires_grad()) chosen.push_back(p);
    return AdamW(std::move(chosen), config);
  }

  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  std::size_t steps() const noexcept { return t_; }

  double grad_norm() const {
    long double sq = 0;
    for (const auto& p : params_)
      if (p.var.has_grad())
        for (T g : p.var.grad().data()) sq += static_cast<long double>(g) * g;
    return static_cast<double>(std::sqrt(sq));
  }

  // Returns the pre-clip gradient norm.
  double step(double lr) {
    for (const auto& p : params_)
      require(p.var.requires_grad(), ErrorKind::config_error,
              "optimizer step on frozen parameter " + p.name + " (group " + p.group + ")");
    const double norm = grad_norm();
    const double clip = config_.grad_clip > 0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& var = params_[i].var;
      if (!var.has_grad()) continue;
      auto& w = var.mutable_value();
      const auto& g = var.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]) * clip;
        m[k] = static_cast<T>(config_.beta1 * m[k] + (1 - config_.beta1) * gk);
        v[k] = static_cast<T>(config_.beta2 * v[k] + (1 - config_.beta2) * gk * gk);
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps);
        w[k] = static_cast<T>(w[k] - lr * (update + config_.weight_decay * w[k]));
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  AdamWConfig config_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace duovid
