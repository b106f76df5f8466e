#include "sfe/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "sfe/blas.hpp"
#include "sfe/optim.hpp"

namespace sfe {

namespace fs = std::filesystem;
using nlohmann::json;

LoadedDataset load_dataset(const DatasetSpec& spec) {
  LoadedDataset out;
  if (spec.kind == "synthetic") {
    out.train = synth_dataset(spec.classes, spec.per_class, spec.channels,
                              spec.height, spec.width, spec.seed);
    out.test = synth_dataset(spec.classes, spec.test_per_class, spec.channels,
                             spec.height, spec.width, derive_seed(spec.seed, 0x7e57));
    return out;
  }
  if (spec.kind == "cifar10") {
    std::string dir = spec.dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("SFE_DATA_DIR")) dir = env;
    }
    if (dir.empty()) {
      throw DataError(
          "cifar10 dataset has no directory: set dataset.dir in the config "
          "or export SFE_DATA_DIR");
    }
    auto join = [&dir](const std::vector<std::string>& names) {
      std::vector<std::string> paths;
      paths.reserve(names.size());
      for (const auto& name : names) paths.push_back((fs::path(dir) / name).string());
      return paths;
    };
    out.train = load_cifar10_files(join(spec.train_files), spec.train_limit);
    out.test = load_cifar10_files(join(spec.test_files), spec.test_limit);
    return out;
  }
  throw ConfigError("unknown dataset kind '" + spec.kind + "'");
}

namespace {

Tensor<float> batch_tensor(const LabeledImageDataset& data,
                           const std::vector<int>& indices, std::size_t first,
                           std::size_t count, const ChannelStats& stats,
                           bool augment, std::mt19937_64* aug_rng,
                           std::vector<int>& labels_out) {
  std::vector<float> pixels;
  pixels.reserve(count * data.image_bytes());
  labels_out.clear();
  for (std::size_t i = 0; i < count; ++i) {
    const int idx = indices[first + i];
    std::vector<float> img;
    if (augment) {
      const auto params = sample_augment_params(*aug_rng);
      img = augment_image(data.image(idx), data.channels, data.height,
                          data.width, params, stats);
    } else {
      img = normalize_image(data.image(idx), data.channels, data.height,
                            data.width, stats);
    }
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels_out.push_back(data.labels[static_cast<std::size_t>(idx)]);
  }
  return Tensor<float>::from_data(
      {static_cast<int>(count), data.channels, data.height, data.width},
      std::move(pixels));
}

int argmax_row(const std::vector<float>& values, int row, int dim) {
  int arg = 0;
  for (int c = 1; c < dim; ++c) {
    if (values[static_cast<std::size_t>(row) * dim + c] >
        values[static_cast<std::size_t>(row) * dim + arg])
      arg = c;
  }
  return arg;
}

}  // namespace

double evaluate_accuracy(SfeModel<float>& model,
                         const LabeledImageDataset& dataset,
                         const ChannelStats& stats, InferenceScheme scheme,
                         int batch_size) {
  if (dataset.size() == 0) throw DataError("evaluate on an empty dataset");
  std::vector<int> order(static_cast<std::size_t>(dataset.size()));
  for (int i = 0; i < dataset.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  int correct = 0;
  std::vector<int> labels;
  for (int start = 0; start < dataset.size(); start += batch_size) {
    const auto count = static_cast<std::size_t>(
        std::min(batch_size, dataset.size() - start));
    auto x = batch_tensor(dataset, order, static_cast<std::size_t>(start),
                          count, stats, false, nullptr, labels);
    auto probs = model.predict_probs(x, scheme);
    const int classes = probs.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      if (argmax_row(probs.values(), static_cast<int>(i), classes) ==
          labels[i])
        ++correct;
    }
  }
  return static_cast<double>(correct) / dataset.size();
}

std::string epoch_record_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"lr", r.lr},
         {"train_loss", r.train_loss},
         {"acc_si", r.acc_si},
         {"acc_ag", r.acc_ag},
         {"wall_ms_per_iter", r.wall_ms_per_iter}};
  if (r.acc_sd) j["acc_sd"] = *r.acc_sd;
  return j.dump();
}

TrainResult train_experiment(ExperimentConfig config, const TrainOptions& options) {
  ops::set_compute_threads(config.threads);

  auto data = load_dataset(config.dataset);
  if (data.train.channels != config.backbone.input_channels ||
      data.train.height != config.backbone.input_height ||
      data.train.width != config.backbone.input_width) {
    throw ConfigError("dataset images are " + std::to_string(data.train.channels) +
                      "x" + std::to_string(data.train.height) + "x" +
                      std::to_string(data.train.width) +
                      " but the backbone expects its configured input shape");
  }
  if (data.train.num_classes != config.backbone.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.train.num_classes) +
                      " classes, backbone expects " +
                      std::to_string(config.backbone.num_classes));
  }
  if (!config.normalization) {
    config.normalization = compute_channel_stats(data.train);
  }
  const ChannelStats& stats = *config.normalization;

  TrainResult result;
  std::shared_ptr<SfeModel<float>> model;
  std::vector<std::vector<float>> velocities;
  int start_epoch = 0;

  if (!options.resume_from.empty()) {
    auto loaded = load_checkpoint(options.resume_from);
    if (config_hash(loaded.config) != config_hash(config)) {
      throw ConfigError(
          "checkpoint '" + options.resume_from +
          "' was produced by a different config (hash mismatch); refusing to resume");
    }
    model = loaded.model;
    velocities = std::move(loaded.velocities);
    start_epoch = loaded.epochs_completed;
  } else {
    model = std::make_shared<SfeModel<float>>(config.backbone, config.plan,
                                              config.model_seed,
                                              config.partition_seed);
  }

  SgdOptimizer<float> opt(model->parameters(), static_cast<float>(config.lr),
                          static_cast<float>(config.momentum),
                          static_cast<float>(config.weight_decay));
  if (!velocities.empty()) opt.velocities() = std::move(velocities);

  LrSchedule schedule{config.lr, config.milestones, config.lr_factor};

  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const auto resolved = fs::path(options.out_dir) / "resolved_config.json";
    std::ofstream cfg_out(resolved);
    if (!cfg_out) throw IoError("cannot write '" + resolved.string() + "'");
    cfg_out << config_to_json(config).dump(2) << "\n";
    result.metrics_path = (fs::path(options.out_dir) / "metrics.jsonl").string();
    metrics.open(result.metrics_path,
                 start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write '" + result.metrics_path + "'");
    result.checkpoint_path =
        (fs::path(options.out_dir) / "checkpoint.sfeck").string();
  }

  const bool has_joint = config.plan.uses_joint_heads();
  EpochRecord last_eval;
  last_eval.acc_sd = config.plan.distill ? std::optional<double>(0.0) : std::nullopt;
  bool evaluated_once = false;
  int epochs_completed = start_epoch;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr = schedule.at_epoch(epoch);
    opt.set_lr(static_cast<float>(lr));
    const auto order = epoch_order(data.train.size(), config.data_seed, epoch);
    auto aug_rng = epoch_augment_rng(config.data_seed, epoch);

    double loss_sum = 0.0;
    int iters = 0;
    double wall_ms = 0.0;
    std::vector<int> labels;
    for (std::size_t first = 0; first < order.size();
         first += static_cast<std::size_t>(config.train_batch)) {
      const auto count = std::min(static_cast<std::size_t>(config.train_batch),
                                  order.size() - first);
      const auto t0 = std::chrono::steady_clock::now();
      auto x = batch_tensor(data.train, order, first, count, stats,
                            config.augment, &aug_rng, labels);
      auto outputs = model->forward_training(x);
      auto parts = training_loss_parts(outputs, labels, config.plan);
      const double loss_value = parts.total.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("training loss became non-finite at epoch " +
                           std::to_string(epoch) + " iteration " +
                           std::to_string(iters));
      }
      opt.zero_grad();
      parts.total.backward();
      opt.step();
      wall_ms += std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
      loss_sum += loss_value;
      result.step_loss.push_back(loss_value);
      if (parts.distill_kl) result.step_kl.push_back(*parts.distill_kl);
      ++iters;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.train_loss = iters ? loss_sum / iters : 0.0;
    record.wall_ms_per_iter = iters ? wall_ms / iters : 0.0;

    const bool eval_now =
        (epoch + 1) % config.eval.every == 0 || epoch + 1 == config.epochs;
    if (eval_now || !evaluated_once) {
      last_eval.acc_si = evaluate_accuracy(*model, data.test, stats,
                                           InferenceScheme::SingleInference,
                                           config.eval_batch);
      last_eval.acc_ag =
          has_joint ? evaluate_accuracy(*model, data.test, stats,
                                        InferenceScheme::AggregatedInference,
                                        config.eval_batch)
                    : last_eval.acc_si;
      if (config.plan.distill) {
        last_eval.acc_sd = evaluate_accuracy(*model, data.test, stats,
                                             InferenceScheme::DistilledInference,
                                             config.eval_batch);
      }
      evaluated_once = true;
    }
    record.acc_si = last_eval.acc_si;
    record.acc_ag = last_eval.acc_ag;
    record.acc_sd = last_eval.acc_sd;

    result.records.push_back(record);
    if (metrics.is_open()) {
      metrics << epoch_record_json(record) << "\n";
      metrics.flush();
    }
    epochs_completed = epoch + 1;
    if (!result.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        epochs_completed % config.checkpoint_every == 0) {
      save_checkpoint(result.checkpoint_path, *model, opt.velocities(), config,
                      epochs_completed);
    }
    if (options.max_epochs_this_run > 0 &&
        epochs_completed - start_epoch >= options.max_epochs_this_run) {
      break;
    }
  }

  if (!result.checkpoint_path.empty()) {
    save_checkpoint(result.checkpoint_path, *model, opt.velocities(), config,
                    epochs_completed);
  }
  result.model = model;
  result.resolved_config = std::move(config);
  return result;
}

// --------------------------------------------------------------------------
// Checkpoint format: "SFCK" magic, u32 version, u64 manifest length, JSON
// manifest, then raw little-endian tensor payloads at the offsets the
// manifest records.
// --------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct BlobEntry {
  std::string name;
  std::string kind;  // "param" | "buffer" | "velocity"
  std::vector<int> shape;
  const float* data;
  std::size_t count;
};

}  // namespace

void save_checkpoint(const std::string& path, SfeModel<float>& model,
                     const std::vector<std::vector<float>>& velocities,
                     const ExperimentConfig& config, int epochs_completed) {
  std::vector<BlobEntry> blobs;
  auto params = model.named_parameters();
  if (!velocities.empty() && velocities.size() != params.size()) {
    throw ConfigError("checkpoint: velocity count does not match parameters");
  }
  for (auto& p : params) {
    blobs.push_back({p.name, "param", p.tensor.shape(),
                     p.tensor.values().data(), p.tensor.values().size()});
  }
  for (auto& b : model.named_buffers()) {
    blobs.push_back({b.name, "buffer", {static_cast<int>(b.data->size())},
                     b.data->data(), b.data->size()});
  }
  for (std::size_t i = 0; i < velocities.size(); ++i) {
    blobs.push_back({"velocity." + params[i].name, "velocity",
                     {static_cast<int>(velocities[i].size())},
                     velocities[i].data(), velocities[i].size()});
  }

  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = config_to_json(config);
  manifest["config_hash"] = config_hash_hex(config);
  manifest["epochs_completed"] = epochs_completed;
  json partitions = json::array();
  for (const auto& att : model.attachments()) {
    partitions.push_back(json::parse(att.partition.to_json()));
  }
  manifest["partitions"] = partitions;
  if (model.masked_partition()) {
    manifest["masked_partition"] =
        json::parse(model.masked_partition()->to_json());
  }

  std::size_t offset = 0;
  json tensor_index = json::array();
  for (const auto& blob : blobs) {
    tensor_index.push_back({{"name", blob.name},
                            {"kind", blob.kind},
                            {"shape", blob.shape},
                            {"offset", offset},
                            {"bytes", blob.count * sizeof(float)}});
    offset += blob.count * sizeof(float);
  }
  manifest["tensors"] = tensor_index;

  const std::string manifest_text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
  const std::uint64_t manifest_len = manifest_text.size();
  out.write(reinterpret_cast<const char*>(&manifest_len), 8);
  out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
  for (const auto& blob : blobs) {
    out.write(reinterpret_cast<const char*>(blob.data),
              static_cast<std::streamsize>(blob.count * sizeof(float)));
  }
  if (!out) throw IoError("short write to checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t manifest_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&manifest_len), 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("'" + path + "' is not a checkpoint (bad magic)");
  }
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) +
                    " not supported");
  }
  std::string manifest_text(manifest_len, '\0');
  in.read(manifest_text.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw DataError("checkpoint manifest truncated");
  json manifest;
  try {
    manifest = json::parse(manifest_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  LoadedCheckpoint loaded;
  loaded.config = config_from_json(manifest.at("config"));
  if (manifest.at("config_hash").get<std::string>() !=
      config_hash_hex(loaded.config)) {
    throw DataError("checkpoint config hash mismatch; refusing to load '" +
                    path + "'");
  }
  loaded.epochs_completed = manifest.at("epochs_completed").get<int>();
  loaded.model = std::make_shared<SfeModel<float>>(
      loaded.config.backbone, loaded.config.plan, loaded.config.model_seed,
      loaded.config.partition_seed);

  // Partitions stored in the manifest are authoritative.
  const auto& partitions = manifest.at("partitions");
  if (partitions.size() != loaded.model->attachments().size()) {
    throw DataError("checkpoint partition count mismatch");
  }
  for (std::size_t i = 0; i < partitions.size(); ++i) {
    auto p = ChannelPartition::from_json(partitions[static_cast<int>(i)].dump());
    auto& att = loaded.model->attachments()[i];
    if (p.channel_count != att.partition.channel_count ||
        p.group_count != att.partition.group_count) {
      throw DataError("checkpoint partition shape mismatch");
    }
    att.partition = std::move(p);
  }

  auto params = loaded.model->named_parameters();
  auto buffers = loaded.model->named_buffers();
  loaded.velocities.assign(params.size(), {});

  const std::streampos payload_start = in.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto kind = entry.at("kind").get<std::string>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto bytes = entry.at("bytes").get<std::uint64_t>();
    std::vector<float> values(bytes / sizeof(float));
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("checkpoint payload truncated at '" + name + "'");

    bool placed = false;
    if (kind == "param") {
      for (auto& p : params) {
        if (p.name == name) {
          if (p.tensor.values().size() != values.size()) {
            throw DataError("checkpoint tensor '" + name + "' has wrong size");
          }
          p.tensor.values() = std::move(values);
          placed = true;
          break;
        }
      }
    } else if (kind == "buffer") {
      for (auto& b : buffers) {
        if (b.name == name) {
          if (b.data->size() != values.size()) {
            throw DataError("checkpoint buffer '" + name + "' has wrong size");
          }
          *b.data = std::move(values);
          placed = true;
          break;
        }
      }
    } else if (kind == "velocity") {
      for (std::size_t i = 0; i < params.size(); ++i) {
        if ("velocity." + params[i].name == name) {
          loaded.velocities[i] = std::move(values);
          placed = true;
          break;
        }
      }
    }
    if (!placed) {
      throw DataError("checkpoint tensor '" + name +
                      "' does not match the rebuilt model");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded.velocities[i].empty()) {
      loaded.velocities[i].assign(params[i].tensor.values().size(), 0.0f);
    }
  }
  return loaded;
}

}  // namespace sfe
