#pragma once

#include <cmath>
#include <vector>

#include "sfe/errors.hpp"
#include "sfe/tensor.hpp"

namespace sfe {

// Step decay: base_lr scaled by factor once per milestone already reached.
struct LrSchedule {
  double base_lr = 0.1;
  std::vector<int> milestones;
  double factor = 0.1;

  double at_epoch(int epoch) const {
    double lr = base_lr;
    for (int m : milestones) {
      if (m <= epoch) lr *= factor;
    }
    return lr;
  }
};

// SGD with classic momentum and coupled weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<T>> params, T lr, T momentum, T weight_decay)
      : params_(std::move(params)),
        lr_(lr),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    if (lr <= T(0)) throw ConfigError("sgd: learning rate must be positive");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) {
      velocity_.emplace_back(p.values().size(), T(0));
    }
  }

  void set_lr(T lr) {
    if (lr <= T(0)) throw ConfigError("sgd: learning rate must be positive");
    lr_ = lr;
  }
  T lr() const { return lr_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& data = params_[k].values();
      const auto* grad = params_[k].grad_if_any();
      auto& vel = velocity_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad ? (*grad)[i] : T(0);
        vel[i] = momentum_ * vel[i] + g + weight_decay_ * data[i];
        data[i] -= lr_ * vel[i];
      }
    }
  }

  std::vector<std::vector<T>>& velocities() { return velocity_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T lr_;
  T momentum_;
  T weight_decay_;
};

}  // namespace sfe
