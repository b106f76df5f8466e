#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfe/heads.hpp"
#include "sfe/inference.hpp"
#include "sfe/layers.hpp"
#include "sfe/partition.hpp"

namespace sfe {

struct BackboneConfig {
  std::vector<int> stage_channels = {16, 32, 64};
  int blocks_per_stage = 1;
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;
  int num_classes = 10;
  int stem_stride = 1;
  // Identity normalization (batch_norm = false) keeps every row of a batch
  // independent; used by tests that track single samples through the trunk.
  bool batch_norm = true;
};

enum class AttachmentMode {
  Baseline,            // trunk + single classifier, plain cross-entropy
  TwoClassifier,       // joint heads after the last two stages
  ThreeClassifier,     // a joint head after every stage
  SingleClassifierAt,  // expand after stage L, propagate through the rest
  MaskedBaseline,      // baseline with one fixed channel group discarded
};

AttachmentMode attachment_mode_from_string(const std::string& name);
std::string attachment_mode_name(AttachmentMode mode);

struct AttachmentPlan {
  AttachmentMode mode = AttachmentMode::TwoClassifier;
  int k = 8;             // masking transforms per head
  double beta = 0.5;     // weight of the non-final heads' losses
  bool distill = false;  // train a single classifier against the aggregate
  int attach_layer = 1;  // 1-based stage index, SingleClassifierAt only
  int masked_group = 0;  // group discarded in MaskedBaseline training

  bool uses_joint_heads() const {
    return mode == AttachmentMode::TwoClassifier ||
           mode == AttachmentMode::ThreeClassifier ||
           mode == AttachmentMode::SingleClassifierAt;
  }
  bool has_single_head() const {
    return distill || mode == AttachmentMode::Baseline ||
           mode == AttachmentMode::MaskedBaseline;
  }
  // K: transforms per head including the identity.
  int num_transforms() const { return uses_joint_heads() ? k + 1 : 1; }
};

template <typename T>
struct PreActBlock {
  std::optional<BatchNorm2dLayer<T>> bn1, bn2;
  Conv2dLayer<T> conv1, conv2;
  std::optional<Conv2dLayer<T>> shortcut;

  static PreActBlock make(int in, int out, int stride, bool batch_norm,
                          std::mt19937_64& rng) {
    PreActBlock block;
    if (batch_norm) {
      block.bn1 = BatchNorm2dLayer<T>::make(in);
      block.bn2 = BatchNorm2dLayer<T>::make(out);
    }
    block.conv1 = Conv2dLayer<T>::make(in, out, 3, stride, 1, !batch_norm, rng);
    block.conv2 = Conv2dLayer<T>::make(out, out, 3, 1, 1, !batch_norm, rng);
    if (in != out || stride != 1) {
      block.shortcut = Conv2dLayer<T>::make(in, out, 1, stride, 0, !batch_norm, rng);
    }
    return block;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    auto h = ops::relu(bn1 ? bn1->forward(x, training) : x);
    auto y = conv1.forward(h);
    y = ops::relu(bn2 ? bn2->forward(y, training) : y);
    y = conv2.forward(y);
    auto skip = shortcut ? shortcut->forward(h) : x;
    return ops::add(y, skip);
  }
};

template <typename T>
struct TrainingOutputs {
  // One logits stack [K*B, N*K] per attached joint head, ordered by stage.
  std::vector<Tensor<T>> head_stacks;
  // The feature stack each head pooled, same order (kept for diagnostics).
  std::vector<Tensor<T>> head_features;
  std::optional<Tensor<T>> single_logits;  // [B, N]
  int batch = 0;
  int num_classes = 0;
  int num_transforms = 0;
};

// Named views over the model's trainable tensors and running buffers.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* data;
};

// Residual trunk with channel-masking heads. One ChannelPartition per
// attached head, drawn once at construction from decorrelated streams.
template <typename T>
class SfeModel {
 public:
  struct Attachment {
    int stage = 0;  // stage whose feature is expanded
    ChannelPartition partition;
    JointHead<T> head;
  };

  SfeModel(BackboneConfig cfg, AttachmentPlan plan, std::uint64_t model_seed,
           std::uint64_t partition_seed);

  const BackboneConfig& config() const { return cfg_; }
  const AttachmentPlan& plan() const { return plan_; }
  int num_stages() const { return static_cast<int>(stages_.size()); }
  const std::vector<Attachment>& attachments() const { return attachments_; }
  std::vector<Attachment>& attachments() { return attachments_; }
  const std::optional<SingleHead<T>>& single_head() const { return single_head_; }
  std::optional<SingleHead<T>>& single_head() { return single_head_; }
  const std::optional<ChannelPartition>& masked_partition() const {
    return masked_partition_;
  }

  // Trunk output after the exit activation, without any expansion.
  Tensor<T> trunk_feature(const Tensor<T>& x, bool training);

  TrainingOutputs<T> forward_training(const Tensor<T>& x);

  // Class probabilities [B, N] under the chosen scheme (no grad, eval norm).
  Tensor<T> predict_probs(const Tensor<T>& x, InferenceScheme scheme);

  // The basic network path: trunk + single classifier logits.
  Tensor<T> plain_logits(const Tensor<T>& x, bool training);

  std::vector<NamedParam<T>> named_parameters();
  std::vector<NamedBuffer<T>> named_buffers();
  std::vector<Tensor<T>> parameters();
  void zero_grad();

 private:
  struct Stage {
    std::vector<PreActBlock<T>> blocks;
    Tensor<T> forward(const Tensor<T>& x, bool training) {
      auto h = x;
      for (auto& block : blocks) h = block.forward(h, training);
      return h;
    }
  };

  Tensor<T> exit_activation(const Tensor<T>& x, bool training) {
    return ops::relu(exit_bn_ ? exit_bn_->forward(x, training) : x);
  }

  // Stage features as seen by the heads: intermediate stages expose their
  // raw output (what the next stage consumes), the final stage exposes the
  // post-activation feature (what the pooling sees).
  std::vector<Tensor<T>> run_trunk(const Tensor<T>& x, bool training);

  void check_input(const Tensor<T>& x) const;

  // Eval-mode expanded pass for propagate-mode aggregation.
  Tensor<T> propagated_stack(const Tensor<T>& x);

  BackboneConfig cfg_;
  AttachmentPlan plan_;
  Conv2dLayer<T> stem_;
  std::vector<Stage> stages_;
  std::optional<BatchNorm2dLayer<T>> exit_bn_;
  std::vector<Attachment> attachments_;
  std::optional<ChannelPartition> masked_partition_;
  std::optional<SingleHead<T>> single_head_;
};

// Detached aggregated-probability teacher computed from the current head
// logits; gradient never flows through it.
template <typename T>
Tensor<T> aggregated_teacher(const TrainingOutputs<T>& outputs) {
  if (outputs.head_stacks.empty()) {
    throw ConfigError("aggregated_teacher: no joint heads in outputs");
  }
  std::vector<Tensor<T>> detached;
  detached.reserve(outputs.head_stacks.size());
  for (const auto& s : outputs.head_stacks) detached.push_back(s.detach());
  return aggregated_inference(detached, outputs.batch, outputs.num_classes,
                              outputs.num_transforms);
}

template <typename T>
struct TrainingLossParts {
  Tensor<T> total;
  double objective = 0.0;  // joint / cross-entropy part
  std::optional<double> distill_ce;
  std::optional<double> distill_kl;
};

// The full training objective for one batch. `teacher_override` substitutes
// a frozen teacher distribution for the distillation term; by default the
// teacher is recomputed from the current outputs (and detached either way).
template <typename T>
TrainingLossParts<T> training_loss_parts(const TrainingOutputs<T>& outputs,
                                         const std::vector<int>& labels,
                                         const AttachmentPlan& plan,
                                         const Tensor<T>* teacher_override = nullptr) {
  Tensor<T> loss;
  switch (plan.mode) {
    case AttachmentMode::Baseline:
    case AttachmentMode::MaskedBaseline:
      if (!outputs.single_logits) {
        throw ConfigError("baseline loss needs single-head logits");
      }
      loss = ops::cross_entropy(*outputs.single_logits, labels);
      break;
    case AttachmentMode::SingleClassifierAt:
      if (outputs.head_stacks.size() != 1) {
        throw ConfigError("single-classifier loss expects exactly one head");
      }
      loss = joint_loss(outputs.head_stacks[0], labels, outputs.num_classes,
                        outputs.num_transforms);
      break;
    case AttachmentMode::TwoClassifier: {
      if (outputs.head_stacks.size() != 2) {
        throw ConfigError("two-classifier loss expects exactly two heads");
      }
      auto pen = joint_loss(outputs.head_stacks[0], labels,
                            outputs.num_classes, outputs.num_transforms);
      auto last = joint_loss(outputs.head_stacks[1], labels,
                             outputs.num_classes, outputs.num_transforms);
      loss = two_classifier_loss(pen, last, plan.beta);
      break;
    }
    case AttachmentMode::ThreeClassifier: {
      if (outputs.head_stacks.size() < 2) {
        throw ConfigError("multi-classifier loss expects several heads");
      }
      if (plan.beta < 0.0 || plan.beta > 1.0) {
        throw ConfigError("beta must lie in [0,1]");
      }
      // Final head at full weight, every earlier head damped by beta.
      loss = joint_loss(outputs.head_stacks.back(), labels,
                        outputs.num_classes, outputs.num_transforms);
      for (std::size_t i = 0; i + 1 < outputs.head_stacks.size(); ++i) {
        auto early = joint_loss(outputs.head_stacks[i], labels,
                                outputs.num_classes, outputs.num_transforms);
        loss = ops::add(loss, ops::scale(early, static_cast<T>(plan.beta)));
      }
      break;
    }
  }
  TrainingLossParts<T> parts;
  parts.objective = static_cast<double>(loss.item());
  if (plan.distill) {
    if (!outputs.single_logits) {
      throw ConfigError("distillation needs single-head logits");
    }
    Tensor<T> teacher =
        teacher_override ? *teacher_override : aggregated_teacher(outputs);
    auto ce = ops::cross_entropy(*outputs.single_logits, labels);
    auto kl = ops::kl_div(teacher, ops::log_softmax(*outputs.single_logits));
    parts.distill_ce = static_cast<double>(ce.item());
    parts.distill_kl = static_cast<double>(kl.item());
    loss = ops::add(loss, ops::add(ce, kl));
  }
  parts.total = loss;
  return parts;
}

template <typename T>
Tensor<T> total_training_loss(const TrainingOutputs<T>& outputs,
                              const std::vector<int>& labels,
                              const AttachmentPlan& plan,
                              const Tensor<T>* teacher_override = nullptr) {
  return training_loss_parts(outputs, labels, plan, teacher_override).total;
}

extern template class SfeModel<float>;
extern template class SfeModel<double>;

}  // namespace sfe
