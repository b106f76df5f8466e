#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sfe/tensor.hpp"

namespace sfe_test {

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8);
}

// Central finite differences of a scalar-valued function with respect to one
// leaf tensor. The function must rebuild its graph from the leaf's current
// values on every call.
template <typename T>
std::vector<double> numeric_gradient(const std::function<double()>& loss_fn,
                                     sfe::Tensor<T>& leaf, double h = 1e-5) {
  std::vector<double> grad(leaf.values().size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const T saved = leaf.values()[i];
    leaf.values()[i] = saved + static_cast<T>(h);
    const double up = loss_fn();
    leaf.values()[i] = saved - static_cast<T>(h);
    const double down = loss_fn();
    leaf.values()[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Checks every element of the analytic gradient of `leaf` against central
// differences; returns the worst relative error seen.
template <typename T>
double max_grad_rel_err(const std::function<double()>& loss_fn,
                        sfe::Tensor<T>& leaf, double h = 1e-5) {
  const auto numeric = numeric_gradient(loss_fn, leaf, h);
  const auto* analytic = leaf.grad_if_any();
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = analytic ? static_cast<double>((*analytic)[i]) : 0.0;
    worst = std::max(worst, rel_err(a, numeric[i]));
  }
  return worst;
}

// Dense six-loop convolution reference, independent of the gemm path.
inline std::vector<double> conv2d_reference(
    const std::vector<double>& x, int b, int ci, int h, int w,
    const std::vector<double>& weight, int co, int kh, int kw,
    const std::vector<double>& bias, int stride, int pad) {
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(b) * co * ho * wo, 0.0);
  for (int n = 0; n < b; ++n)
    for (int oc = 0; oc < co; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[oc];
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((static_cast<std::size_t>(n) * ci + ic) * h + iy) * w + ix] *
                       weight[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
              }
          out[((static_cast<std::size_t>(n) * co + oc) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, T lo = T(-1),
                             T hi = T(1)) {
  std::uniform_real_distribution<T> dist(lo, hi);
  std::vector<T> v(n);
  for (auto& e : v) e = dist(rng);
  return v;
}

}  // namespace sfe_test
