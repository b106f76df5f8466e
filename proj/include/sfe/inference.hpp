#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfe/errors.hpp"
#include "sfe/tensor.hpp"

namespace sfe {

enum class InferenceScheme {
  SingleInference,      // identity columns of the last joint head
  AggregatedInference,  // logits averaged over every (head, transform) pair
  DistilledInference,   // the plain single classifier
};

InferenceScheme scheme_from_string(const std::string& name);
std::string scheme_name(InferenceScheme scheme);

namespace detail {

template <typename T>
void softmax_rows_inplace(std::vector<T>& rows, int batch, int dim) {
  for (int i = 0; i < batch; ++i) {
    T* row = rows.data() + static_cast<std::size_t>(i) * dim;
    T mx = row[0];
    for (int j = 1; j < dim; ++j) mx = std::max(mx, row[j]);
    T norm = T(0);
    for (int j = 0; j < dim; ++j) {
      row[j] = std::exp(row[j] - mx);
      norm += row[j];
    }
    for (int j = 0; j < dim; ++j) row[j] /= norm;
  }
}

}  // namespace detail

// Class probabilities of the identity transform: softmax over the N logits
// at columns {i*K + 0}. Expects logits of the original, untransformed
// feature.
template <typename T>
Tensor<T> single_inference(const Tensor<T>& joint_logits, int num_classes,
                           int num_transforms) {
  if (joint_logits.rank() != 2 ||
      joint_logits.dim(1) != num_classes * num_transforms) {
    throw ConfigError("single_inference: logits have " +
                      std::to_string(joint_logits.dim(1)) +
                      " columns, expected " +
                      std::to_string(num_classes * num_transforms));
  }
  const int batch = joint_logits.dim(0);
  std::vector<T> probs(static_cast<std::size_t>(batch) * num_classes);
  const auto& lv = joint_logits.values();
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < num_classes; ++i) {
      probs[static_cast<std::size_t>(b) * num_classes + i] =
          lv[static_cast<std::size_t>(b) * num_classes * num_transforms +
             static_cast<std::size_t>(i) * num_transforms];
    }
  }
  detail::softmax_rows_inplace(probs, batch, num_classes);
  return Tensor<T>::from_data({batch, num_classes}, std::move(probs));
}

// Aggregation over transformed features: each logits stack holds one head's
// K blocks in expand_batch order, and block j is scored only at its own
// column i*K + j. The per-class score is the mean over every (head, j) pair,
// followed by one softmax.
template <typename T>
Tensor<T> aggregated_inference(const std::vector<Tensor<T>>& logit_stacks,
                               int batch, int num_classes, int num_transforms) {
  if (logit_stacks.empty()) {
    throw ConfigError("aggregated_inference: no logit stacks");
  }
  for (const auto& stack : logit_stacks) {
    if (stack.rank() != 2 || stack.dim(0) != batch * num_transforms ||
        stack.dim(1) != num_classes * num_transforms) {
      throw ConfigError(
          "aggregated_inference: stack shape " + shape_str(stack.shape()) +
          " does not supply all " + std::to_string(num_transforms) +
          " transform slots for batch " + std::to_string(batch));
    }
  }
  const std::size_t terms = logit_stacks.size() * num_transforms;
  std::vector<T> z(static_cast<std::size_t>(batch) * num_classes, T(0));
  for (const auto& stack : logit_stacks) {
    const auto& sv = stack.values();
    const int cols = num_classes * num_transforms;
    for (int j = 0; j < num_transforms; ++j) {
      for (int b = 0; b < batch; ++b) {
        const T* row = sv.data() +
                       (static_cast<std::size_t>(j) * batch + b) * cols;
        for (int i = 0; i < num_classes; ++i) {
          z[static_cast<std::size_t>(b) * num_classes + i] +=
              row[static_cast<std::size_t>(i) * num_transforms + j];
        }
      }
    }
  }
  for (auto& v : z) v /= static_cast<T>(terms);
  detail::softmax_rows_inplace(z, batch, num_classes);
  return Tensor<T>::from_data({batch, num_classes}, std::move(z));
}

// The basic network path: softmax of the single classifier's logits.
template <typename T>
Tensor<T> distilled_inference(const Tensor<T>& single_logits) {
  if (single_logits.rank() != 2) {
    throw ConfigError("distilled_inference expects 2-d logits");
  }
  std::vector<T> probs = single_logits.values();
  detail::softmax_rows_inplace(probs, single_logits.dim(0), single_logits.dim(1));
  return Tensor<T>::from_data(single_logits.shape(), std::move(probs));
}

}  // namespace sfe
