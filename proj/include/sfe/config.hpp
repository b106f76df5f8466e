#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfe/data.hpp"
#include "sfe/model.hpp"
#include "sfe/optim.hpp"

namespace sfe {

struct DatasetSpec {
  std::string kind = "synthetic";  // "synthetic" | "cifar10"

  // synthetic
  int classes = 4;
  int per_class = 64;
  int test_per_class = 16;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 1;

  // cifar10; an empty dir falls back to the SFE_DATA_DIR environment variable
  std::string dir;
  std::vector<std::string> train_files = {"data_batch_1.bin", "data_batch_2.bin",
                                          "data_batch_3.bin", "data_batch_4.bin",
                                          "data_batch_5.bin"};
  std::vector<std::string> test_files = {"test_batch.bin"};
  int train_limit = -1;  // -1 keeps everything
  int test_limit = -1;
};

struct EvalSettings {
  int every = 1;  // evaluate at epochs where (epoch+1) % every == 0
};

struct ExperimentConfig {
  BackboneConfig backbone;
  AttachmentPlan plan;

  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  int epochs = 60;
  std::vector<int> milestones = {30, 45};
  double lr_factor = 0.1;

  int train_batch = 128;
  int eval_batch = 256;

  std::uint64_t model_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t partition_seed = 3;

  DatasetSpec dataset;
  bool augment = true;
  int threads = 0;  // 0 picks the hardware default
  EvalSettings eval;
  int checkpoint_every = 0;  // 0 saves only the final checkpoint

  // Normalization constants; computed from the training split on first use
  // and carried in the resolved config afterwards.
  std::optional<ChannelStats> normalization;
};

// Parses a config object, filling every unset field with its default and
// validating ranges. Throws ConfigError on malformed input.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);

// Fully materialized form: every field present, defaults included.
nlohmann::json config_to_json(const ExperimentConfig& config);

// FNV-1a over the canonical serialized config, excluding the derived
// normalization block. Identifies the experiment for checkpoint/resume.
std::uint64_t config_hash(const ExperimentConfig& config);
std::string config_hash_hex(const ExperimentConfig& config);

}  // namespace sfe
