#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sfe/blas.hpp"
#include "sfe/errors.hpp"
#include "sfe/tensor.hpp"

namespace sfe::ops {

struct OpStats {
  std::uint64_t conv2d_calls = 0;
  std::uint64_t conv2d_macs = 0;
};

OpStats& op_stats();
void reset_op_stats();

// Engine worker threads for convolution chunks. Results are deterministic
// for a fixed thread count (static partitioning, ordered reductions);
// bit-exact reproducibility across runs requires the same setting.
void set_compute_threads(int n);
int compute_threads();

namespace detail {

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(where) + " produced a non-finite value");
    }
  }
}

template <typename T>
bool track(const Tensor<T>& t) {
  return grad_enabled() && t.requires_grad();
}

// Worth spinning up workers only for buffers past this size.
constexpr std::int64_t kParallelCutoff = 1 << 16;

inline bool parallel_for_size(std::int64_t n) {
  return compute_threads() > 1 && n >= kParallelCutoff;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  const std::int64_t n = out.numel();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
  for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (detail::track(a) || detail::track(b)) {
    out.attach("add", {a.node(), b.node()},
               [an = a.node(), bn = b.node(), n](auto& self) {
                 if (an->requires_grad) {
                   auto& g = an->grad_buffer();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
                   for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[i];
                 }
                 if (bn->requires_grad) {
                   auto& g = bn->grad_buffer();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
                   for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[i];
                 }
               });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  const std::int64_t n = out.numel();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
  for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (detail::track(a) || detail::track(b)) {
    out.attach("mul", {a.node(), b.node()},
               [an = a.node(), bn = b.node(), n](auto& self) {
                 if (an->requires_grad) {
                   auto& g = an->grad_buffer();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
                   for (std::int64_t i = 0; i < n; ++i)
                     g[i] += self.grad[i] * bn->data[i];
                 }
                 if (bn->requires_grad) {
                   auto& g = bn->grad_buffer();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
                   for (std::int64_t i = 0; i < n; ++i)
                     g[i] += self.grad[i] * an->data[i];
                 }
               });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = factor * av[i];
  if (detail::track(a)) {
    out.attach("scale", {a.node()}, [an = a.node(), factor](auto& self) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  const std::int64_t n = out.numel();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
  for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (detail::track(x)) {
    out.attach("relu", {x.node()}, [xn = x.node(), n](auto& self) {
      auto& g = xn->grad_buffer();
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(n))
      for (std::int64_t i = 0; i < n; ++i)
        if (xn->data[i] > T(0)) g[i] += self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  auto out = Tensor<T>::from_data({1}, {total});
  if (detail::track(x)) {
    out.attach("sum", {x.node()}, [xn = x.node()](auto& self) {
      auto& g = xn->grad_buffer();
      const T go = self.grad[0];
      for (auto& v : g) v += go;
    });
  }
  return out;
}

// y = x W^T + b with x:[B,D], W:[O,D], b:[O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2) {
    throw ConfigError("linear expects 2-d input and weight");
  }
  const int b = x.dim(0), d = x.dim(1);
  const int o = weight.dim(0);
  if (weight.dim(1) != d || bias.numel() != o) {
    throw ConfigError("linear: incompatible shapes x" + shape_str(x.shape()) +
                      " W" + shape_str(weight.shape()));
  }
  auto out = Tensor<T>::zeros({b, o});
  if (b > 0) {
    blas::gemm(false, true, b, o, d, T(1), x.values().data(), d,
               weight.values().data(), d, T(0), out.values().data(), o);
  }
  auto& ov = out.values();
  const auto& bv = bias.values();
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < o; ++j) ov[static_cast<std::size_t>(i) * o + j] += bv[j];
  detail::ensure_finite(out, "linear");
  if (detail::track(x) || detail::track(weight) || detail::track(bias)) {
    out.attach(
        "linear", {x.node(), weight.node(), bias.node()},
        [xn = x.node(), wn = weight.node(), bn = bias.node(), b, d, o](auto& self) {
          const T* g = self.grad.data();
          if (xn->requires_grad && b > 0) {
            // dX = dY W
            blas::gemm(false, false, b, d, o, T(1), g, o, wn->data.data(), d,
                       T(1), xn->grad_buffer().data(), d);
          }
          if (wn->requires_grad && b > 0) {
            // dW = dY^T X
            blas::gemm(true, false, o, d, b, T(1), g, o, xn->data.data(), d,
                       T(1), wn->grad_buffer().data(), d);
          }
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (int i = 0; i < b; ++i)
              for (int j = 0; j < o; ++j)
                gb[j] += g[static_cast<std::size_t>(i) * o + j];
          }
        });
  }
  return out;
}

namespace detail {

// Unrolls padded windows of images [b0, b0+count) into a column matrix of
// shape [ci*kh*kw, count*ho*wo], the layout gemm consumes. Writes every
// element, so the buffer needs no pre-clearing.
template <typename T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, int b0, int count, std::vector<T>& col) {
  const std::int64_t cols = static_cast<std::int64_t>(count) * ho * wo;
  col.resize(static_cast<std::size_t>(ci) * kh * kw * cols);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t image = static_cast<std::int64_t>(ci) * plane;
  for (int g = 0; g < count; ++g) {
    const T* img = x + (b0 + g) * image;
    for (int c = 0; c < ci; ++c) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const std::int64_t row =
              (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
          T* dst = col.data() + row * cols +
                   static_cast<std::int64_t>(g) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) {
              for (int ox = 0; ox < wo; ++ox) *dst++ = T(0);
              continue;
            }
            const T* src = img + c * plane + static_cast<std::int64_t>(iy) * w;
            if (pad == 0 && stride == 1) {
              const int base = kx;  // every ox stays in range when kw <= w
              for (int ox = 0; ox < wo; ++ox) *dst++ = src[base + ox];
            } else {
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                *dst++ = (ix >= 0 && ix < w) ? src[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

// Scatters a column-matrix gradient back onto the padded input windows.
template <typename T>
void col2im(const std::vector<T>& col, int ci, int h, int w, int kh, int kw,
            int stride, int pad, int ho, int wo, int b0, int count, T* gx) {
  const std::int64_t cols = static_cast<std::int64_t>(count) * ho * wo;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t image = static_cast<std::int64_t>(ci) * plane;
  for (int g = 0; g < count; ++g) {
    T* img = gx + (b0 + g) * image;
    for (int c = 0; c < ci; ++c) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const std::int64_t row =
              (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
          const T* src = col.data() + row * cols +
                         static_cast<std::int64_t>(g) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) {
              src += wo;
              continue;
            }
            T* dst = img + c * plane + static_cast<std::int64_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < w) dst[ix] += *src;
              ++src;
            }
          }
        }
      }
    }
  }
}

inline int conv_chunk_images(std::int64_t col_rows, std::int64_t cols_per_image,
                             int batch, int threads) {
  constexpr std::int64_t kBudget = 4ll << 20;  // floats held per chunk
  std::int64_t per_image = col_rows * cols_per_image;
  if (per_image <= 0) return batch;
  int chunk = static_cast<int>(std::max<std::int64_t>(1, kBudget / per_image));
  if (threads > 1) {
    // Enough chunks to occupy every worker.
    const int per_thread = (batch + 2 * threads - 1) / (2 * threads);
    chunk = std::min(chunk, std::max(1, per_thread));
  }
  return std::min(chunk, batch);
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>* bias, int stride, int pad) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ConfigError("conv2d expects 4-d input and weight");
  }
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != ci) {
    throw ConfigError("conv2d: input has " + std::to_string(ci) +
                      " channels but weight expects " +
                      std::to_string(weight.dim(1)));
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw ConfigError("conv2d: kernel larger than padded input");
  }
  if (bias && bias->numel() != co) {
    throw ConfigError("conv2d: bias size mismatch");
  }
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  const std::int64_t k_rows = static_cast<std::int64_t>(ci) * kh * kw;
  const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;

  auto out = Tensor<T>::zeros({b, co, ho, wo});
  auto& ov = out.values();
  const int threads = compute_threads();
  const int chunk =
      detail::conv_chunk_images(k_rows, out_plane, std::max(b, 1), threads);
  const int num_chunks = b > 0 ? (b + chunk - 1) / chunk : 0;
#pragma omp parallel for schedule(static) num_threads(threads) \
    if (threads > 1 && num_chunks > 1)
  for (int ci_idx = 0; ci_idx < num_chunks; ++ci_idx) {
    static thread_local std::vector<T> col, y;
    const int b0 = ci_idx * chunk;
    const int count = std::min(chunk, b - b0);
    detail::im2col(x.values().data(), ci, h, w, kh, kw, stride, pad, ho, wo,
                   b0, count, col);
    const std::int64_t cols = count * out_plane;
    y.resize(static_cast<std::size_t>(co) * cols);
    blas::gemm(false, false, co, static_cast<int>(cols),
               static_cast<int>(k_rows), T(1), weight.values().data(),
               static_cast<int>(k_rows), col.data(), static_cast<int>(cols),
               T(0), y.data(), static_cast<int>(cols));
    for (int c = 0; c < co; ++c) {
      for (int g = 0; g < count; ++g) {
        std::memcpy(ov.data() + ((b0 + g) * static_cast<std::int64_t>(co) + c) *
                                    out_plane,
                    y.data() + c * cols + g * out_plane,
                    sizeof(T) * static_cast<std::size_t>(out_plane));
      }
    }
  }
  if (bias) {
    const auto& bv = bias->values();
    for (int i = 0; i < b; ++i)
      for (int c = 0; c < co; ++c) {
        T* dst = ov.data() + (i * static_cast<std::int64_t>(co) + c) * out_plane;
        for (std::int64_t s = 0; s < out_plane; ++s) dst[s] += bv[c];
      }
  }
  detail::ensure_finite(out, "conv2d");
  op_stats().conv2d_calls += 1;
  op_stats().conv2d_macs += static_cast<std::uint64_t>(b) * co * out_plane *
                            static_cast<std::uint64_t>(k_rows);

  const bool need = detail::track(x) || detail::track(weight) ||
                    (bias && detail::track(*bias));
  if (need) {
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents{
        x.node(), weight.node()};
    auto bias_node = bias ? bias->node() : nullptr;
    if (bias_node) parents.push_back(bias_node);
    out.attach(
        "conv2d", std::move(parents),
        [xn = x.node(), wn = weight.node(), bias_node, b, ci, h, w, co, kh, kw,
         stride, pad, ho, wo, k_rows, out_plane](auto& self) {
          const T* g = self.grad.data();
          const int threads = compute_threads();
          const int chunk = detail::conv_chunk_images(k_rows, out_plane,
                                                      std::max(b, 1), threads);
          const int num_chunks = b > 0 ? (b + chunk - 1) / chunk : 0;
          const bool parallel = threads > 1 && num_chunks > 1;
          // Chunks write disjoint slices of dX; dW and db accumulate into
          // per-thread buffers merged in thread order afterwards, keeping
          // the result deterministic under a fixed thread count. The
          // sequential path writes straight into the grad buffers.
          const int lanes = parallel ? threads : 0;
          std::vector<std::vector<T>> dw_lane(
              static_cast<std::size_t>(wn->requires_grad ? lanes : 0)),
              db_lane(static_cast<std::size_t>(
                  bias_node && bias_node->requires_grad ? lanes : 0));
          T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
          if (wn->requires_grad) wn->grad_buffer();
          if (bias_node && bias_node->requires_grad) bias_node->grad_buffer();
#pragma omp parallel num_threads(threads) if (parallel)
          {
#ifdef _OPENMP
            const int lane = parallel ? omp_get_thread_num() : 0;
#else
            const int lane = 0;
#endif
            static thread_local std::vector<T> col, gy, gcol;
#pragma omp for schedule(static)
            for (int chunk_idx = 0; chunk_idx < num_chunks; ++chunk_idx) {
              const int b0 = chunk_idx * chunk;
              const int count = std::min(chunk, b - b0);
              const std::int64_t cols = count * out_plane;
              // Gather dY for this chunk into [co, count*ho*wo].
              gy.resize(static_cast<std::size_t>(co) * cols);
              for (int c = 0; c < co; ++c)
                for (int gi = 0; gi < count; ++gi)
                  std::memcpy(
                      gy.data() + c * cols + gi * out_plane,
                      g + ((b0 + gi) * static_cast<std::int64_t>(co) + c) *
                              out_plane,
                      sizeof(T) * static_cast<std::size_t>(out_plane));
              if (wn->requires_grad) {
                auto& dw = dw_lane.empty() ? wn->grad : dw_lane[static_cast<std::size_t>(lane)];
                if (!dw_lane.empty() && dw.empty())
                  dw.assign(wn->data.size(), T(0));
                detail::im2col(xn->data.data(), ci, h, w, kh, kw, stride, pad,
                               ho, wo, b0, count, col);
                blas::gemm(false, true, co, static_cast<int>(k_rows),
                           static_cast<int>(cols), T(1), gy.data(),
                           static_cast<int>(cols), col.data(),
                           static_cast<int>(cols), T(1), dw.data(),
                           static_cast<int>(k_rows));
              }
              if (gx) {
                gcol.resize(static_cast<std::size_t>(k_rows) * cols);
                blas::gemm(true, false, static_cast<int>(k_rows),
                           static_cast<int>(cols), co, T(1), wn->data.data(),
                           static_cast<int>(k_rows), gy.data(),
                           static_cast<int>(cols), T(0), gcol.data(),
                           static_cast<int>(cols));
                detail::col2im(gcol, ci, h, w, kh, kw, stride, pad, ho, wo, b0,
                               count, gx);
              }
              if (bias_node && bias_node->requires_grad) {
                auto& db = db_lane.empty()
                               ? bias_node->grad
                               : db_lane[static_cast<std::size_t>(lane)];
                if (!db_lane.empty() && db.empty())
                  db.assign(bias_node->data.size(), T(0));
                for (int c = 0; c < co; ++c) {
                  T acc = T(0);
                  const T* row = gy.data() + c * cols;
                  for (std::int64_t s = 0; s < cols; ++s) acc += row[s];
                  db[static_cast<std::size_t>(c)] += acc;
                }
              }
            }
          }
          if (parallel) {
            if (wn->requires_grad) {
              auto& dw = wn->grad;
              for (const auto& lane_buf : dw_lane) {
                if (lane_buf.empty()) continue;
                for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += lane_buf[i];
              }
            }
            if (bias_node && bias_node->requires_grad) {
              auto& db = bias_node->grad;
              for (const auto& lane_buf : db_lane) {
                if (lane_buf.empty()) continue;
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += lane_buf[i];
              }
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int pad) {
  return conv2d(x, weight, &bias, stride, pad);
}

// Batch normalization over [B,C,H,W]. Training mode normalizes with batch
// statistics and folds them into the running estimates (unbiased variance);
// eval mode applies the running estimates.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, std::vector<T>& running_mean,
                       std::vector<T>& running_var, bool training, T momentum,
                       T eps) {
  if (x.rank() != 4) throw ConfigError("batch_norm2d expects a 4-d input");
  if (eps <= T(0)) throw ConfigError("batch_norm2d: eps must be positive");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c ||
      static_cast<int>(running_mean.size()) != c ||
      static_cast<int>(running_var.size()) != c) {
    throw ConfigError("batch_norm2d: channel count mismatch");
  }
  if (b == 0) throw ConfigError("batch_norm2d over an empty batch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t n = static_cast<std::int64_t>(b) * plane;

  std::vector<T> mean(c, T(0)), ivar(c, T(0));
  if (training) {
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(static_cast<std::int64_t>(b) * c * plane))
    for (int ch = 0; ch < c; ++ch) {
      T total = T(0);
      for (int i = 0; i < b; ++i) {
        const T* src = x.values().data() +
                       (i * static_cast<std::int64_t>(c) + ch) * plane;
        T acc = T(0);
        for (std::int64_t s = 0; s < plane; ++s) acc += src[s];
        total += acc;
      }
      const T m = total / static_cast<T>(n);
      T sq = T(0);
      for (int i = 0; i < b; ++i) {
        const T* src = x.values().data() +
                       (i * static_cast<std::int64_t>(c) + ch) * plane;
        T acc = T(0);
        for (std::int64_t s = 0; s < plane; ++s) {
          const T d = src[s] - m;
          acc += d * d;
        }
        sq += acc;
      }
      const T var = sq / static_cast<T>(n);
      mean[ch] = m;
      ivar[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased =
          n > 1 ? var * static_cast<T>(n) / static_cast<T>(n - 1) : var;
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * m;
      running_var[ch] =
          (T(1) - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    mean = running_mean;
    for (int ch = 0; ch < c; ++ch)
      ivar[ch] = T(1) / std::sqrt(running_var[ch] + eps);
  }

  auto out = Tensor<T>::zeros(x.shape());
  auto& ov = out.values();
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  const std::int64_t slabs = static_cast<std::int64_t>(b) * c;
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(slabs* plane))
  for (std::int64_t slab = 0; slab < slabs; ++slab) {
    const int ch = static_cast<int>(slab % c);
    const std::int64_t base = slab * plane;
    const T m = mean[static_cast<std::size_t>(ch)],
            iv = ivar[static_cast<std::size_t>(ch)], ga = gv[static_cast<std::size_t>(ch)],
            be = bv[static_cast<std::size_t>(ch)];
    for (std::int64_t s = 0; s < plane; ++s)
      ov[base + s] = ga * (xv[base + s] - m) * iv + be;
  }
  detail::ensure_finite(out, "batch_norm2d");

  if (detail::track(x) || detail::track(gamma) || detail::track(beta)) {
    out.attach(
        "batch_norm2d", {x.node(), gamma.node(), beta.node()},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), mean, ivar, b, c,
         plane, n, training](auto& self) {
          const T* g = self.grad.data();
          std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(static_cast<std::int64_t>(b) * c * plane))
          for (int ch = 0; ch < c; ++ch) {
            T a0 = T(0), a1 = T(0);
            const T m = mean[ch], iv = ivar[ch];
            for (int i = 0; i < b; ++i) {
              const std::int64_t base =
                  (i * static_cast<std::int64_t>(c) + ch) * plane;
              T p0 = T(0), p1 = T(0);
              for (std::int64_t s = 0; s < plane; ++s) {
                const T gh = g[base + s];
                p0 += gh;
                p1 += gh * (xn->data[base + s] - m) * iv;
              }
              a0 += p0;
              a1 += p1;
            }
            sum_g[ch] = a0;
            sum_gx[ch] = a1;
          }
          if (gn->requires_grad) {
            auto& gg = gn->grad_buffer();
            for (int ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
          }
          if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (int ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
          }
          if (xn->requires_grad) {
            auto& gx = xn->grad_buffer();
            const std::int64_t slabs = static_cast<std::int64_t>(b) * c;
#pragma omp parallel for schedule(static) num_threads(compute_threads()) \
    if (detail::parallel_for_size(slabs* plane))
            for (std::int64_t slab = 0; slab < slabs; ++slab) {
              const int ch = static_cast<int>(slab % c);
              const std::int64_t base = slab * plane;
              const T m = mean[static_cast<std::size_t>(ch)],
                      iv = ivar[static_cast<std::size_t>(ch)],
                      ga = gn->data[static_cast<std::size_t>(ch)];
              if (training) {
                const T k0 = sum_g[static_cast<std::size_t>(ch)] / static_cast<T>(n);
                const T k1 = sum_gx[static_cast<std::size_t>(ch)] / static_cast<T>(n);
                for (std::int64_t s = 0; s < plane; ++s) {
                  const T xh = (xn->data[base + s] - m) * iv;
                  gx[base + s] += ga * iv * (g[base + s] - k0 - xh * k1);
                }
              } else {
                for (std::int64_t s = 0; s < plane; ++s)
                  gx[base + s] += ga * iv * g[base + s];
              }
            }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ConfigError("global_avg_pool expects a 4-d input");
  const int b = x.dim(0), c = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  if (plane == 0) throw ConfigError("global_avg_pool over an empty map");
  auto out = Tensor<T>::zeros({b, c});
  auto& ov = out.values();
  const auto& xv = x.values();
  for (int i = 0; i < b; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = xv.data() + (i * static_cast<std::int64_t>(c) + ch) * plane;
      T acc = T(0);
      for (std::int64_t s = 0; s < plane; ++s) acc += src[s];
      ov[static_cast<std::size_t>(i) * c + ch] = acc / static_cast<T>(plane);
    }
  if (detail::track(x)) {
    out.attach("global_avg_pool", {x.node()},
               [xn = x.node(), b, c, plane](auto& self) {
                 auto& gx = xn->grad_buffer();
                 for (int i = 0; i < b; ++i)
                   for (int ch = 0; ch < c; ++ch) {
                     const T go =
                         self.grad[static_cast<std::size_t>(i) * c + ch] /
                         static_cast<T>(plane);
                     T* dst = gx.data() +
                              (i * static_cast<std::int64_t>(c) + ch) * plane;
                     for (std::int64_t s = 0; s < plane; ++s) dst[s] += go;
                   }
               });
  }
  return out;
}

// Zeroes whole channels; the mask is broadcast over batch and space.
// Gradient flows only through the surviving channels.
template <typename T>
Tensor<T> channel_mask(const Tensor<T>& x, const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 4) throw ConfigError("channel_mask expects a 4-d input");
  const int b = x.dim(0), c = x.dim(1);
  if (static_cast<int>(mask.size()) != c) {
    throw ConfigError("channel_mask: mask covers " +
                      std::to_string(mask.size()) + " channels, input has " +
                      std::to_string(c));
  }
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  auto out = Tensor<T>::zeros(x.shape());
  auto& ov = out.values();
  const auto& xv = x.values();
  for (int i = 0; i < b; ++i)
    for (int ch = 0; ch < c; ++ch) {
      if (!mask[ch]) continue;
      const std::int64_t base = (i * static_cast<std::int64_t>(c) + ch) * plane;
      std::memcpy(ov.data() + base, xv.data() + base,
                  sizeof(T) * static_cast<std::size_t>(plane));
    }
  if (detail::track(x)) {
    out.attach("channel_mask", {x.node()},
               [xn = x.node(), mask, b, c, plane](auto& self) {
                 auto& gx = xn->grad_buffer();
                 for (int i = 0; i < b; ++i)
                   for (int ch = 0; ch < c; ++ch) {
                     if (!mask[ch]) continue;
                     const std::int64_t base =
                         (i * static_cast<std::int64_t>(c) + ch) * plane;
                     for (std::int64_t s = 0; s < plane; ++s)
                       gx[base + s] += self.grad[base + s];
                   }
               });
  }
  return out;
}

// Stacks tensors along dim 0; trailing dimensions must agree.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw ConfigError("concat_rows: trailing shape mismatch");
    rows += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  auto out = Tensor<T>::zeros(out_shape);
  auto& ov = out.values();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::memcpy(ov.data() + offset, p.values().data(),
                sizeof(T) * p.values().size());
    offset += p.values().size();
  }
  bool need = false;
  for (const auto& p : parts) need = need || detail::track(p);
  if (need) {
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    out.attach("concat_rows", nodes, [nodes](auto& self) {
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          auto& g = n->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[offset + i];
        }
        offset += n->data.size();
      }
    });
  }
  return out;
}

// Copies rows [start, start+count) along dim 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int start, int count) {
  if (x.rank() < 1 || start < 0 || count < 0 || start + count > x.dim(0)) {
    throw ConfigError("slice_rows: rows [" + std::to_string(start) + "," +
                      std::to_string(start + count) + ") outside [0," +
                      std::to_string(x.rank() ? x.dim(0) : 0) + ")");
  }
  Shape out_shape = x.shape();
  out_shape[0] = count;
  const std::size_t row_size =
      x.dim(0) ? x.values().size() / static_cast<std::size_t>(x.dim(0)) : 0;
  auto out = Tensor<T>::zeros(out_shape);
  std::memcpy(out.values().data(),
              x.values().data() + static_cast<std::size_t>(start) * row_size,
              sizeof(T) * static_cast<std::size_t>(count) * row_size);
  if (detail::track(x)) {
    out.attach("slice_rows", {x.node()},
               [xn = x.node(), start, row_size](auto& self) {
                 auto& g = xn->grad_buffer();
                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                   g[static_cast<std::size_t>(start) * row_size + i] +=
                       self.grad[i];
               });
  }
  return out;
}

// Row-wise stabilized softmax over [B,D].
template <typename T>
Tensor<T> softmax(const Tensor<T>& z) {
  if (z.rank() != 2) throw ConfigError("softmax expects a 2-d input");
  const int b = z.dim(0), d = z.dim(1);
  if (d < 1) throw ConfigError("softmax over an empty row");
  auto out = Tensor<T>::zeros(z.shape());
  auto& ov = out.values();
  const auto& zv = z.values();
  for (int i = 0; i < b; ++i) {
    const T* row = zv.data() + static_cast<std::size_t>(i) * d;
    T* orow = ov.data() + static_cast<std::size_t>(i) * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T norm = T(0);
    for (int j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      norm += orow[j];
    }
    for (int j = 0; j < d; ++j) orow[j] /= norm;
  }
  detail::ensure_finite(out, "softmax");
  if (detail::track(z)) {
    out.attach("softmax", {z.node()}, [zn = z.node(), b, d](auto& self) {
      auto& gz = zn->grad_buffer();
      for (int i = 0; i < b; ++i) {
        const T* s = self.data.data() + static_cast<std::size_t>(i) * d;
        const T* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += g[j] * s[j];
        T* dst = gz.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& z) {
  if (z.rank() != 2) throw ConfigError("log_softmax expects a 2-d input");
  const int b = z.dim(0), d = z.dim(1);
  if (d < 1) throw ConfigError("log_softmax over an empty row");
  auto out = Tensor<T>::zeros(z.shape());
  auto& ov = out.values();
  const auto& zv = z.values();
  for (int i = 0; i < b; ++i) {
    const T* row = zv.data() + static_cast<std::size_t>(i) * d;
    T* orow = ov.data() + static_cast<std::size_t>(i) * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T norm = T(0);
    for (int j = 0; j < d; ++j) norm += std::exp(row[j] - mx);
    const T lse = mx + std::log(norm);
    for (int j = 0; j < d; ++j) orow[j] = row[j] - lse;
  }
  detail::ensure_finite(out, "log_softmax");
  if (detail::track(z)) {
    out.attach("log_softmax", {z.node()}, [zn = z.node(), b, d](auto& self) {
      auto& gz = zn->grad_buffer();
      for (int i = 0; i < b; ++i) {
        const T* lq = self.data.data() + static_cast<std::size_t>(i) * d;
        const T* g = self.grad.data() + static_cast<std::size_t>(i) * d;
        T gsum = T(0);
        for (int j = 0; j < d; ++j) gsum += g[j];
        T* dst = gz.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += g[j] - std::exp(lq[j]) * gsum;
      }
    });
  }
  return out;
}

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ConfigError("cross_entropy expects 2-d logits");
  const int b = logits.dim(0), d = logits.dim(1);
  if (static_cast<int>(targets.size()) != b) {
    throw ConfigError("cross_entropy: " + std::to_string(targets.size()) +
                      " targets for " + std::to_string(b) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= d) {
      throw DataError("cross_entropy: target " + std::to_string(t) +
                      " outside [0," + std::to_string(d) + ")");
    }
  }
  const auto& zv = logits.values();
  T loss = T(0);
  for (int i = 0; i < b; ++i) {
    const T* row = zv.data() + static_cast<std::size_t>(i) * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T norm = T(0);
    for (int j = 0; j < d; ++j) norm += std::exp(row[j] - mx);
    loss += mx + std::log(norm) - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<T>(b);
  auto out = Tensor<T>::from_data({1}, {loss});
  detail::ensure_finite(out, "cross_entropy");
  if (detail::track(logits)) {
    out.attach("cross_entropy", {logits.node()},
               [zn = logits.node(), targets, b, d](auto& self) {
                 auto& gz = zn->grad_buffer();
                 const T go = self.grad[0] / static_cast<T>(b);
                 for (int i = 0; i < b; ++i) {
                   const T* row = zn->data.data() + static_cast<std::size_t>(i) * d;
                   T mx = row[0];
                   for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
                   T norm = T(0);
                   for (int j = 0; j < d; ++j) norm += std::exp(row[j] - mx);
                   T* dst = gz.data() + static_cast<std::size_t>(i) * d;
                   for (int j = 0; j < d; ++j)
                     dst[j] += go * std::exp(row[j] - mx) / norm;
                   dst[targets[static_cast<std::size_t>(i)]] -= go;
                 }
               });
  }
  return out;
}

// Mean over rows of sum_d p * (log p - logq). Rows of p must be probability
// vectors; terms with p = 0 contribute nothing.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& p, const Tensor<T>& logq) {
  if (p.shape() != logq.shape() || p.rank() != 2) {
    throw ConfigError("kl_div expects matching 2-d inputs");
  }
  const int b = p.dim(0), d = p.dim(1);
  const auto& pv = p.values();
  const auto& qv = logq.values();
  for (int i = 0; i < b; ++i) {
    T rowsum = T(0);
    for (int j = 0; j < d; ++j) {
      const T v = pv[static_cast<std::size_t>(i) * d + j];
      if (v < T(0)) throw DataError("kl_div: negative probability");
      rowsum += v;
    }
    if (std::abs(rowsum - T(1)) > T(1e-6)) {
      throw DataError("kl_div: distribution row does not sum to 1");
    }
  }
  T loss = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] > T(0)) loss += pv[i] * (std::log(pv[i]) - qv[i]);
  }
  loss /= static_cast<T>(b);
  auto out = Tensor<T>::from_data({1}, {loss});
  detail::ensure_finite(out, "kl_div");
  if (detail::track(p) || detail::track(logq)) {
    out.attach("kl_div", {p.node(), logq.node()},
               [pn = p.node(), qn = logq.node(), b](auto& self) {
                 const T go = self.grad[0] / static_cast<T>(b);
                 if (qn->requires_grad) {
                   auto& gq = qn->grad_buffer();
                   for (std::size_t i = 0; i < gq.size(); ++i)
                     gq[i] -= go * pn->data[i];
                 }
                 if (pn->requires_grad) {
                   auto& gp = pn->grad_buffer();
                   for (std::size_t i = 0; i < gp.size(); ++i) {
                     const T pe = std::max(pn->data[i],
                                           std::numeric_limits<T>::min());
                     gp[i] += go * (std::log(pe) - qn->data[i] + T(1));
                   }
                 }
               });
  }
  return out;
}

}  // namespace sfe::ops
