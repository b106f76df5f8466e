#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sfe/layers.hpp"
#include "sfe/ops.hpp"
#include "sfe/partition.hpp"

namespace sfe {

// Flat joint-label codec, class-major: flat = y * K + j.
inline int joint_label_encode(int y, int j, int num_classes, int num_transforms) {
  if (y < 0 || y >= num_classes || j < 0 || j >= num_transforms) {
    throw ConfigError("joint label (" + std::to_string(y) + "," +
                      std::to_string(j) + ") outside [0," +
                      std::to_string(num_classes) + ")x[0," +
                      std::to_string(num_transforms) + ")");
  }
  return y * num_transforms + j;
}

inline std::pair<int, int> joint_label_decode(int flat, int num_classes,
                                              int num_transforms) {
  if (flat < 0 || flat >= num_classes * num_transforms) {
    throw ConfigError("joint label " + std::to_string(flat) + " outside [0," +
                      std::to_string(num_classes * num_transforms) + ")");
  }
  return {flat / num_transforms, flat % num_transforms};
}

// Joint (class x transform) classifier over pooled features: a single affine
// map with N*K outputs. Scores row (y, j) live at column y*K + j.
template <typename T>
struct JointHead {
  LinearLayer<T> fc;
  int num_classes = 0;
  int num_transforms = 0;
  int attached_stage = 0;

  static JointHead make(int feature_dim, int num_classes, int num_transforms,
                        int attached_stage, std::mt19937_64& rng) {
    JointHead head;
    head.fc = LinearLayer<T>::make(feature_dim, num_classes * num_transforms, rng);
    head.num_classes = num_classes;
    head.num_transforms = num_transforms;
    head.attached_stage = attached_stage;
    return head;
  }

  // Pooled-feature logits for a feature stack [B', C, H, W].
  Tensor<T> forward(const Tensor<T>& features) const {
    return fc.forward(ops::global_avg_pool(features));
  }
};

// Plain N-way classifier restoring the basic network output.
template <typename T>
struct SingleHead {
  LinearLayer<T> fc;
  int num_classes = 0;

  static SingleHead make(int feature_dim, int num_classes, std::mt19937_64& rng) {
    SingleHead head;
    head.fc = LinearLayer<T>::make(feature_dim, num_classes, rng);
    head.num_classes = num_classes;
    return head;
  }

  Tensor<T> forward(const Tensor<T>& features) const {
    return fc.forward(ops::global_avg_pool(features));
  }
};

// Mean cross-entropy over the K transform blocks of an expanded-batch logits
// stack, each block scored against its own joint label. Equal block sizes
// make the 1/K transform weighting identical to a mean over all rows.
template <typename T>
Tensor<T> joint_loss(const Tensor<T>& logits_stack,
                     const std::vector<int>& labels, int num_classes,
                     int num_transforms) {
  if (logits_stack.rank() != 2 ||
      logits_stack.dim(1) != num_classes * num_transforms) {
    throw ConfigError("joint_loss: logits have " +
                      std::to_string(logits_stack.dim(1)) +
                      " columns, expected N*K = " +
                      std::to_string(num_classes * num_transforms));
  }
  const int batch = static_cast<int>(labels.size());
  if (logits_stack.dim(0) != batch * num_transforms) {
    throw ConfigError("joint_loss: stack has " +
                      std::to_string(logits_stack.dim(0)) + " rows, expected K*B = " +
                      std::to_string(batch * num_transforms));
  }
  std::vector<int> flat(static_cast<std::size_t>(batch) * num_transforms);
  for (int j = 0; j < num_transforms; ++j) {
    for (int b = 0; b < batch; ++b) {
      flat[static_cast<std::size_t>(j) * batch + b] =
          joint_label_encode(labels[static_cast<std::size_t>(b)], j,
                             num_classes, num_transforms);
    }
  }
  return ops::cross_entropy(logits_stack, flat);
}

// Weighted two-head objective: the last-stage loss plus beta times the
// penultimate-stage loss; beta in [0,1] damps the penultimate head.
template <typename T>
Tensor<T> two_classifier_loss(const Tensor<T>& loss_penultimate,
                              const Tensor<T>& loss_last, double beta) {
  if (beta < 0.0 || beta > 1.0) {
    throw ConfigError("two_classifier_loss: beta must lie in [0,1], got " +
                      std::to_string(beta));
  }
  return ops::add(loss_last, ops::scale(loss_penultimate, static_cast<T>(beta)));
}

// Self-distillation objective: cross-entropy on the ground-truth labels plus
// KL from the aggregated teacher distribution to the student softmax. The
// teacher is a plain probability tensor and receives no gradient.
template <typename T>
Tensor<T> distillation_loss(const Tensor<T>& single_logits,
                            const std::vector<int>& labels,
                            const Tensor<T>& teacher_probs) {
  if (single_logits.shape() != teacher_probs.shape()) {
    throw ConfigError("distillation_loss: student and teacher shapes differ");
  }
  auto ce = ops::cross_entropy(single_logits, labels);
  auto kl = ops::kl_div(teacher_probs, ops::log_softmax(single_logits));
  return ops::add(ce, kl);
}

}  // namespace sfe
