#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "sfe/ops.hpp"
#include "sfe/tensor.hpp"

namespace sfe {

// He fan-in scaled normal init.
template <typename T>
Tensor<T> he_init(Shape shape, int fan_in, std::mt19937_64& rng) {
  const T stddev = static_cast<T>(std::sqrt(2.0 / fan_in));
  return Tensor<T>::randn(std::move(shape), rng, stddev, true);
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;  // [out, in, kh, kw]
  std::optional<Tensor<T>> bias;
  int stride = 1;
  int pad = 0;

  static Conv2dLayer make(int in, int out, int kernel, int stride, int pad,
                          bool with_bias, std::mt19937_64& rng) {
    Conv2dLayer layer;
    layer.weight = he_init<T>({out, in, kernel, kernel}, in * kernel * kernel, rng);
    if (with_bias) layer.bias = Tensor<T>::zeros({out}, true);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return ops::conv2d(x, weight, bias ? &*bias : nullptr, stride, pad);
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm2dLayer make(int channels) {
    BatchNorm2dLayer layer;
    layer.gamma = Tensor<T>::full({channels}, T(1), true);
    layer.beta = Tensor<T>::zeros({channels}, true);
    layer.running_mean.assign(static_cast<std::size_t>(channels), T(0));
    layer.running_var.assign(static_cast<std::size_t>(channels), T(1));
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return ops::batch_norm2d(x, gamma, beta, running_mean, running_var,
                             training, momentum, eps);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  static LinearLayer make(int in, int out, std::mt19937_64& rng) {
    LinearLayer layer;
    layer.weight = he_init<T>({out, in}, in, rng);
    layer.bias = Tensor<T>::zeros({out}, true);
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return ops::linear(x, weight, bias);
  }
};

}  // namespace sfe
