#include "sfe/config.hpp"

#include <fstream>

namespace sfe {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& what) { throw ConfigError(what); }

const json* find(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? nullptr : &*it;
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
  if (const json* v = find(j, key)) {
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      bad(std::string("config field '") + key + "' has the wrong type");
    }
  }
}

BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig cfg;
  read_into(j, "stage_channels", cfg.stage_channels);
  read_into(j, "blocks_per_stage", cfg.blocks_per_stage);
  if (const json* input = find(j, "input")) {
    std::vector<int> dims;
    try {
      dims = input->get<std::vector<int>>();
    } catch (const json::exception&) {
      bad("backbone.input must be [channels, height, width]");
    }
    if (dims.size() != 3) bad("backbone.input must be [channels, height, width]");
    cfg.input_channels = dims[0];
    cfg.input_height = dims[1];
    cfg.input_width = dims[2];
  }
  read_into(j, "classes", cfg.num_classes);
  read_into(j, "stem_stride", cfg.stem_stride);
  read_into(j, "batch_norm", cfg.batch_norm);
  if (cfg.stage_channels.size() < 2) bad("backbone needs at least two stages");
  for (int c : cfg.stage_channels)
    if (c < 1) bad("backbone stage channels must be positive");
  if (cfg.stem_stride < 1 || cfg.stem_stride > 2) bad("stem_stride must be 1 or 2");
  return cfg;
}

json backbone_to_json(const BackboneConfig& cfg) {
  return json{{"stage_channels", cfg.stage_channels},
              {"blocks_per_stage", cfg.blocks_per_stage},
              {"input", {cfg.input_channels, cfg.input_height, cfg.input_width}},
              {"classes", cfg.num_classes},
              {"stem_stride", cfg.stem_stride},
              {"batch_norm", cfg.batch_norm}};
}

AttachmentPlan plan_from_json(const json& j) {
  AttachmentPlan plan;
  if (const json* mode = find(j, "mode")) {
    if (!mode->is_string()) bad("plan.mode must be a string");
    plan.mode = attachment_mode_from_string(mode->get<std::string>());
  }
  read_into(j, "k", plan.k);
  read_into(j, "beta", plan.beta);
  read_into(j, "distill", plan.distill);
  read_into(j, "attach_layer", plan.attach_layer);
  read_into(j, "masked_group", plan.masked_group);
  if (plan.beta < 0.0 || plan.beta > 1.0) bad("plan.beta must lie in [0,1]");
  if (plan.uses_joint_heads() && plan.k < 1) bad("plan.k must be at least 1");
  return plan;
}

json plan_to_json(const AttachmentPlan& plan) {
  return json{{"mode", attachment_mode_name(plan.mode)},
              {"k", plan.k},
              {"beta", plan.beta},
              {"distill", plan.distill},
              {"attach_layer", plan.attach_layer},
              {"masked_group", plan.masked_group}};
}

DatasetSpec dataset_from_json(const json& j) {
  DatasetSpec spec;
  read_into(j, "kind", spec.kind);
  if (spec.kind != "synthetic" && spec.kind != "cifar10") {
    bad("dataset.kind must be 'synthetic' or 'cifar10'");
  }
  read_into(j, "classes", spec.classes);
  read_into(j, "per_class", spec.per_class);
  read_into(j, "test_per_class", spec.test_per_class);
  read_into(j, "channels", spec.channels);
  read_into(j, "height", spec.height);
  read_into(j, "width", spec.width);
  read_into(j, "seed", spec.seed);
  read_into(j, "dir", spec.dir);
  read_into(j, "train_files", spec.train_files);
  read_into(j, "test_files", spec.test_files);
  read_into(j, "train_limit", spec.train_limit);
  read_into(j, "test_limit", spec.test_limit);
  return spec;
}

json dataset_to_json(const DatasetSpec& spec) {
  return json{{"kind", spec.kind},
              {"classes", spec.classes},
              {"per_class", spec.per_class},
              {"test_per_class", spec.test_per_class},
              {"channels", spec.channels},
              {"height", spec.height},
              {"width", spec.width},
              {"seed", spec.seed},
              {"dir", spec.dir},
              {"train_files", spec.train_files},
              {"test_files", spec.test_files},
              {"train_limit", spec.train_limit},
              {"test_limit", spec.test_limit}};
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) bad("config root must be a JSON object");
  ExperimentConfig cfg;
  if (const json* b = find(j, "backbone")) cfg.backbone = backbone_from_json(*b);
  if (const json* p = find(j, "plan")) cfg.plan = plan_from_json(*p);
  if (const json* o = find(j, "optimizer")) {
    read_into(*o, "lr", cfg.lr);
    read_into(*o, "momentum", cfg.momentum);
    read_into(*o, "weight_decay", cfg.weight_decay);
  }
  if (const json* s = find(j, "schedule")) {
    read_into(*s, "epochs", cfg.epochs);
    read_into(*s, "milestones", cfg.milestones);
    read_into(*s, "factor", cfg.lr_factor);
  }
  if (const json* b = find(j, "batch")) {
    read_into(*b, "train", cfg.train_batch);
    read_into(*b, "eval", cfg.eval_batch);
  }
  if (const json* s = find(j, "seeds")) {
    read_into(*s, "model", cfg.model_seed);
    read_into(*s, "data", cfg.data_seed);
    read_into(*s, "partition", cfg.partition_seed);
  }
  if (const json* d = find(j, "dataset")) cfg.dataset = dataset_from_json(*d);
  read_into(j, "augment", cfg.augment);
  read_into(j, "threads", cfg.threads);
  if (const json* e = find(j, "eval")) read_into(*e, "every", cfg.eval.every);
  read_into(j, "checkpoint_every", cfg.checkpoint_every);
  if (const json* n = find(j, "normalization")) {
    ChannelStats stats;
    read_into(*n, "mean", stats.mean);
    read_into(*n, "stddev", stats.stddev);
    if (stats.mean.size() != stats.stddev.size() || stats.mean.empty()) {
      bad("normalization must carry matching mean/stddev arrays");
    }
    cfg.normalization = std::move(stats);
  }

  if (cfg.lr <= 0.0) bad("optimizer.lr must be positive");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) bad("optimizer.momentum must lie in [0,1)");
  if (cfg.weight_decay < 0.0) bad("optimizer.weight_decay must be nonnegative");
  if (cfg.epochs < 1) bad("schedule.epochs must be at least 1");
  for (std::size_t i = 1; i < cfg.milestones.size(); ++i) {
    if (cfg.milestones[i - 1] > cfg.milestones[i]) {
      bad("schedule.milestones must be sorted ascending");
    }
  }
  if (cfg.lr_factor <= 0.0 || cfg.lr_factor > 1.0) bad("schedule.factor must lie in (0,1]");
  if (cfg.train_batch < 1 || cfg.eval_batch < 1) bad("batch sizes must be positive");
  if (cfg.eval.every < 1) bad("eval.every must be at least 1");
  if (cfg.checkpoint_every < 0) bad("checkpoint_every must be nonnegative");
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j{
      {"backbone", backbone_to_json(cfg.backbone)},
      {"plan", plan_to_json(cfg.plan)},
      {"optimizer",
       {{"lr", cfg.lr}, {"momentum", cfg.momentum}, {"weight_decay", cfg.weight_decay}}},
      {"schedule",
       {{"epochs", cfg.epochs}, {"milestones", cfg.milestones}, {"factor", cfg.lr_factor}}},
      {"batch", {{"train", cfg.train_batch}, {"eval", cfg.eval_batch}}},
      {"seeds",
       {{"model", cfg.model_seed},
        {"data", cfg.data_seed},
        {"partition", cfg.partition_seed}}},
      {"dataset", dataset_to_json(cfg.dataset)},
      {"augment", cfg.augment},
      {"threads", cfg.threads},
      {"eval", {{"every", cfg.eval.every}}},
      {"checkpoint_every", cfg.checkpoint_every}};
  if (cfg.normalization) {
    j["normalization"] = {{"mean", cfg.normalization->mean},
                          {"stddev", cfg.normalization->stddev}};
  }
  return j;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  ExperimentConfig identity = config;
  identity.normalization.reset();
  const std::string canonical = config_to_json(identity).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash_hex(const ExperimentConfig& config) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(config_hash(config)));
  return buf;
}

}  // namespace sfe
