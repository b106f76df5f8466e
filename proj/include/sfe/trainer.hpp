#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sfe/config.hpp"
#include "sfe/data.hpp"
#include "sfe/model.hpp"

namespace sfe {

struct LoadedDataset {
  LabeledImageDataset train;
  LabeledImageDataset test;
};

// Materializes the configured dataset. CIFAR-10 resolves its directory from
// the spec or the SFE_DATA_DIR environment variable.
LoadedDataset load_dataset(const DatasetSpec& spec);

// Top-1 accuracy over the dataset in its stored order.
double evaluate_accuracy(SfeModel<float>& model,
                         const LabeledImageDataset& dataset,
                         const ChannelStats& stats, InferenceScheme scheme,
                         int batch_size);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double acc_si = 0.0;
  double acc_ag = 0.0;
  std::optional<double> acc_sd;
  double wall_ms_per_iter = 0.0;
};

std::string epoch_record_json(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> records;
  std::vector<double> step_loss;
  std::vector<double> step_kl;  // per-step distillation KL, when distilling
  std::shared_ptr<SfeModel<float>> model;
  ExperimentConfig resolved_config;
  std::string checkpoint_path;  // set when out_dir was given
  std::string metrics_path;
};

struct TrainOptions {
  std::string out_dir;            // empty trains in memory only
  std::string resume_from;        // checkpoint path to continue from
  int max_epochs_this_run = 0;    // 0 runs to completion; otherwise stop
                                  // early (checkpoint stays resumable)
};

// Runs the configured experiment: seeded shuffling and augmentation, the
// joint objective, SGD with the step schedule, per-epoch evaluation, JSONL
// metrics and checkpointing.
TrainResult train_experiment(ExperimentConfig config,
                             const TrainOptions& options = {});

// Versioned binary checkpoint with an embedded JSON manifest. Restores
// parameters, normalization buffers, optimizer velocities and the channel
// partitions bit-exactly.
void save_checkpoint(const std::string& path, SfeModel<float>& model,
                     const std::vector<std::vector<float>>& velocities,
                     const ExperimentConfig& config, int epochs_completed);

struct LoadedCheckpoint {
  ExperimentConfig config;
  std::shared_ptr<SfeModel<float>> model;
  std::vector<std::vector<float>> velocities;
  int epochs_completed = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace sfe
