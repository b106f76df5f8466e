#include "sfe/model.hpp"

namespace sfe {

AttachmentMode attachment_mode_from_string(const std::string& name) {
  if (name == "baseline") return AttachmentMode::Baseline;
  if (name == "two_classifier") return AttachmentMode::TwoClassifier;
  if (name == "three_classifier") return AttachmentMode::ThreeClassifier;
  if (name == "single_layer") return AttachmentMode::SingleClassifierAt;
  if (name == "masked_baseline") return AttachmentMode::MaskedBaseline;
  throw ConfigError("unknown attachment mode '" + name + "'");
}

std::string attachment_mode_name(AttachmentMode mode) {
  switch (mode) {
    case AttachmentMode::Baseline:
      return "baseline";
    case AttachmentMode::TwoClassifier:
      return "two_classifier";
    case AttachmentMode::ThreeClassifier:
      return "three_classifier";
    case AttachmentMode::SingleClassifierAt:
      return "single_layer";
    case AttachmentMode::MaskedBaseline:
      return "masked_baseline";
  }
  throw ConfigError("invalid attachment mode");
}

template <typename T>
SfeModel<T>::SfeModel(BackboneConfig cfg, AttachmentPlan plan,
                      std::uint64_t model_seed, std::uint64_t partition_seed)
    : cfg_(std::move(cfg)), plan_(std::move(plan)) {
  const int num_stages = static_cast<int>(cfg_.stage_channels.size());
  if (num_stages < 2) {
    throw ConfigError("backbone needs at least two stages");
  }
  if (cfg_.blocks_per_stage < 1) {
    throw ConfigError("blocks_per_stage must be at least 1");
  }
  if (cfg_.num_classes < 2) {
    throw ConfigError("num_classes must be at least 2");
  }
  if (plan_.beta < 0.0 || plan_.beta > 1.0) {
    throw ConfigError("beta must lie in [0,1]");
  }
  if (plan_.uses_joint_heads() && plan_.k < 1) {
    throw ConfigError("k must be at least 1");
  }
  if (plan_.mode == AttachmentMode::SingleClassifierAt &&
      (plan_.attach_layer < 1 || plan_.attach_layer > num_stages)) {
    throw ConfigError("attach_layer " + std::to_string(plan_.attach_layer) +
                      " outside [1," + std::to_string(num_stages) + "]");
  }

  std::mt19937_64 rng(model_seed);
  const bool bn = cfg_.batch_norm;
  stem_ = Conv2dLayer<T>::make(cfg_.input_channels, cfg_.stage_channels[0], 3,
                               cfg_.stem_stride, 1, !bn, rng);
  int prev = cfg_.stage_channels[0];
  for (int s = 0; s < num_stages; ++s) {
    Stage stage;
    const int out = cfg_.stage_channels[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
      const int in = b == 0 ? prev : out;
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      stage.blocks.push_back(PreActBlock<T>::make(in, out, stride, bn, rng));
    }
    prev = out;
    stages_.push_back(std::move(stage));
  }
  if (bn) exit_bn_ = BatchNorm2dLayer<T>::make(prev);

  std::vector<int> attach_stages;
  switch (plan_.mode) {
    case AttachmentMode::TwoClassifier:
      attach_stages = {num_stages - 2, num_stages - 1};
      break;
    case AttachmentMode::ThreeClassifier:
      for (int s = 0; s < num_stages; ++s) attach_stages.push_back(s);
      break;
    case AttachmentMode::SingleClassifierAt:
      attach_stages = {plan_.attach_layer - 1};
      break;
    case AttachmentMode::Baseline:
    case AttachmentMode::MaskedBaseline:
      break;
  }

  const int num_transforms = plan_.num_transforms();
  for (std::size_t i = 0; i < attach_stages.size(); ++i) {
    const int stage = attach_stages[i];
    const int channels = cfg_.stage_channels[static_cast<std::size_t>(stage)];
    if (plan_.k > channels) {
      throw ConfigError("k = " + std::to_string(plan_.k) + " exceeds the " +
                        std::to_string(channels) + " channels of stage " +
                        std::to_string(stage + 1));
    }
    Attachment att;
    att.stage = stage;
    att.partition =
        make_partition(channels, plan_.k, derive_seed(partition_seed, i));
    // In propagate mode the expanded features flow through the remaining
    // stages before reaching the classifier.
    const int head_dim = plan_.mode == AttachmentMode::SingleClassifierAt
                             ? cfg_.stage_channels.back()
                             : channels;
    att.head = JointHead<T>::make(head_dim, cfg_.num_classes, num_transforms,
                                  stage, rng);
    attachments_.push_back(std::move(att));
  }

  if (plan_.mode == AttachmentMode::MaskedBaseline) {
    const int channels = cfg_.stage_channels.back();
    if (plan_.k > channels || plan_.k < 1) {
      throw ConfigError("masked baseline needs 1 <= k <= last-stage channels");
    }
    if (plan_.masked_group < 0 || plan_.masked_group >= plan_.k) {
      throw ConfigError("masked_group outside [0,k)");
    }
    masked_partition_ =
        make_partition(channels, plan_.k, derive_seed(partition_seed, 0));
  }

  if (plan_.has_single_head()) {
    single_head_ =
        SingleHead<T>::make(cfg_.stage_channels.back(), cfg_.num_classes, rng);
  }
}

template <typename T>
std::vector<Tensor<T>> SfeModel<T>::run_trunk(const Tensor<T>& x,
                                              bool training) {
  std::vector<Tensor<T>> taps;
  taps.reserve(stages_.size());
  auto feat = stem_.forward(x);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    feat = stages_[s].forward(feat, training);
    taps.push_back(feat);
  }
  taps.back() = exit_activation(feat, training);
  return taps;
}

template <typename T>
void SfeModel<T>::check_input(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.input_channels ||
      x.dim(2) != cfg_.input_height || x.dim(3) != cfg_.input_width) {
    throw ConfigError("input shape " + shape_str(x.shape()) +
                      " does not match the configured [*," +
                      std::to_string(cfg_.input_channels) + "," +
                      std::to_string(cfg_.input_height) + "," +
                      std::to_string(cfg_.input_width) + "]");
  }
}

template <typename T>
Tensor<T> SfeModel<T>::trunk_feature(const Tensor<T>& x, bool training) {
  check_input(x);
  return run_trunk(x, training).back();
}

template <typename T>
TrainingOutputs<T> SfeModel<T>::forward_training(const Tensor<T>& x) {
  check_input(x);
  TrainingOutputs<T> out;
  out.batch = x.dim(0);
  out.num_classes = cfg_.num_classes;
  out.num_transforms = plan_.num_transforms();

  if (plan_.mode == AttachmentMode::SingleClassifierAt) {
    auto& att = attachments_.front();
    auto feat = stem_.forward(x);
    for (int s = 0; s <= att.stage; ++s) {
      feat = stages_[static_cast<std::size_t>(s)].forward(feat, true);
    }
    Tensor<T> rows;
    if (att.stage == num_stages() - 1) {
      // Expansion of the final feature: mask the post-activation map.
      rows = expand_batch(exit_activation(feat, true), att.partition).rows;
    } else {
      rows = expand_batch(feat, att.partition).rows;
      for (int s = att.stage + 1; s < num_stages(); ++s) {
        rows = stages_[static_cast<std::size_t>(s)].forward(rows, true);
      }
      rows = exit_activation(rows, true);
    }
    out.head_stacks.push_back(att.head.forward(rows));
    out.head_features.push_back(rows);
    if (single_head_) {
      auto original = ops::slice_rows(rows, 0, out.batch);
      out.single_logits = single_head_->forward(original);
    }
    return out;
  }

  auto taps = run_trunk(x, true);
  for (auto& att : attachments_) {
    auto expanded =
        expand_batch(taps[static_cast<std::size_t>(att.stage)], att.partition);
    out.head_features.push_back(expanded.rows);
    out.head_stacks.push_back(att.head.forward(expanded.rows));
  }
  if (single_head_) {
    auto feature = taps.back();
    if (plan_.mode == AttachmentMode::MaskedBaseline) {
      feature =
          apply_transform(feature, *masked_partition_, plan_.masked_group + 1);
    }
    out.single_logits = single_head_->forward(feature);
  }
  return out;
}

template <typename T>
Tensor<T> SfeModel<T>::plain_logits(const Tensor<T>& x, bool training) {
  if (!single_head_) {
    throw ConfigError("model has no single classifier");
  }
  check_input(x);
  return single_head_->forward(run_trunk(x, training).back());
}

template <typename T>
Tensor<T> SfeModel<T>::propagated_stack(const Tensor<T>& x) {
  auto& att = attachments_.front();
  auto feat = stem_.forward(x);
  for (int s = 0; s <= att.stage; ++s) {
    feat = stages_[static_cast<std::size_t>(s)].forward(feat, false);
  }
  Tensor<T> rows;
  if (att.stage == num_stages() - 1) {
    rows = expand_batch(exit_activation(feat, false), att.partition).rows;
  } else {
    rows = expand_batch(feat, att.partition).rows;
    for (int s = att.stage + 1; s < num_stages(); ++s) {
      rows = stages_[static_cast<std::size_t>(s)].forward(rows, false);
    }
    rows = exit_activation(rows, false);
  }
  return att.head.forward(rows);
}

template <typename T>
Tensor<T> SfeModel<T>::predict_probs(const Tensor<T>& x,
                                     InferenceScheme scheme) {
  NoGradGuard guard;
  check_input(x);
  const int num_transforms = plan_.num_transforms();
  switch (scheme) {
    case InferenceScheme::SingleInference: {
      if (!plan_.uses_joint_heads()) {
        return distilled_inference(plain_logits(x, false));
      }
      if (plan_.mode == AttachmentMode::SingleClassifierAt) {
        // Eval-mode normalization treats rows independently, so the
        // unexpanded pass equals the identity block of the expansion.
        auto logits =
            attachments_.front().head.forward(run_trunk(x, false).back());
        return single_inference(logits, cfg_.num_classes, num_transforms);
      }
      auto taps = run_trunk(x, false);
      auto& att = attachments_.back();
      auto logits =
          att.head.forward(taps[static_cast<std::size_t>(att.stage)]);
      return single_inference(logits, cfg_.num_classes, num_transforms);
    }
    case InferenceScheme::AggregatedInference: {
      if (!plan_.uses_joint_heads()) {
        throw ConfigError("aggregated inference needs joint heads");
      }
      std::vector<Tensor<T>> stacks;
      if (plan_.mode == AttachmentMode::SingleClassifierAt) {
        stacks.push_back(propagated_stack(x));
      } else {
        auto taps = run_trunk(x, false);
        for (auto& att : attachments_) {
          auto expanded = expand_batch(
              taps[static_cast<std::size_t>(att.stage)], att.partition);
          stacks.push_back(att.head.forward(expanded.rows));
        }
      }
      return aggregated_inference(stacks, x.dim(0), cfg_.num_classes,
                                  num_transforms);
    }
    case InferenceScheme::DistilledInference: {
      if (!single_head_ || !plan_.distill) {
        throw ConfigError(
            "distilled inference needs a distillation-trained model");
      }
      return distilled_inference(plain_logits(x, false));
    }
  }
  throw ConfigError("invalid inference scheme");
}

template <typename T>
std::vector<NamedParam<T>> SfeModel<T>::named_parameters() {
  std::vector<NamedParam<T>> out;
  auto add_conv = [&out](const std::string& name, Conv2dLayer<T>& conv) {
    out.push_back({name + ".weight", conv.weight});
    if (conv.bias) out.push_back({name + ".bias", *conv.bias});
  };
  auto add_bn = [&out](const std::string& name,
                       std::optional<BatchNorm2dLayer<T>>& bn) {
    if (!bn) return;
    out.push_back({name + ".gamma", bn->gamma});
    out.push_back({name + ".beta", bn->beta});
  };
  add_conv("stem", stem_);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      auto& block = stages_[s].blocks[b];
      const std::string prefix =
          "stage" + std::to_string(s) + ".block" + std::to_string(b);
      add_bn(prefix + ".bn1", block.bn1);
      add_conv(prefix + ".conv1", block.conv1);
      add_bn(prefix + ".bn2", block.bn2);
      add_conv(prefix + ".conv2", block.conv2);
      if (block.shortcut) add_conv(prefix + ".shortcut", *block.shortcut);
    }
  }
  add_bn("exit_bn", exit_bn_);
  for (std::size_t i = 0; i < attachments_.size(); ++i) {
    const std::string prefix = "head" + std::to_string(i);
    out.push_back({prefix + ".weight", attachments_[i].head.fc.weight});
    out.push_back({prefix + ".bias", attachments_[i].head.fc.bias});
  }
  if (single_head_) {
    out.push_back({"single.weight", single_head_->fc.weight});
    out.push_back({"single.bias", single_head_->fc.bias});
  }
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> SfeModel<T>::named_buffers() {
  std::vector<NamedBuffer<T>> out;
  auto add_bn = [&out](const std::string& name,
                       std::optional<BatchNorm2dLayer<T>>& bn) {
    if (!bn) return;
    out.push_back({name + ".running_mean", &bn->running_mean});
    out.push_back({name + ".running_var", &bn->running_var});
  };
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      auto& block = stages_[s].blocks[b];
      const std::string prefix =
          "stage" + std::to_string(s) + ".block" + std::to_string(b);
      add_bn(prefix + ".bn1", block.bn1);
      add_bn(prefix + ".bn2", block.bn2);
    }
  }
  add_bn("exit_bn", exit_bn_);
  return out;
}

template <typename T>
std::vector<Tensor<T>> SfeModel<T>::parameters() {
  std::vector<Tensor<T>> out;
  for (auto& named : named_parameters()) out.push_back(named.tensor);
  return out;
}

template <typename T>
void SfeModel<T>::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

template class SfeModel<float>;
template class SfeModel<double>;

}  // namespace sfe
