#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfe/diagnostics.hpp"
#include "sfe/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

void emit_resolved_config(const sfe::ExperimentConfig& config) {
  std::cerr << "resolved config: " << sfe::config_to_json(config).dump() << "\n";
}

// --data accepts inline JSON (starting with '{') or a path to a JSON file.
sfe::DatasetSpec parse_data_arg(const std::string& arg) {
  json j;
  if (!arg.empty() && arg.front() == '{') {
    try {
      j = json::parse(arg);
    } catch (const json::exception& e) {
      throw sfe::ConfigError(std::string("--data is not valid JSON: ") + e.what());
    }
  } else {
    std::ifstream in(arg);
    if (!in) throw sfe::ConfigError("cannot open data spec '" + arg + "'");
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw sfe::ConfigError("data spec '" + arg + "' is not valid JSON: " + e.what());
    }
  }
  json wrapper{{"dataset", j}};
  return sfe::config_from_json(wrapper).dataset;
}

struct EvalData {
  sfe::LabeledImageDataset test;
  sfe::ChannelStats stats;
};

EvalData eval_data_for(const sfe::LoadedCheckpoint& ckpt,
                       const std::string& data_arg) {
  sfe::DatasetSpec spec =
      data_arg.empty() ? ckpt.config.dataset : parse_data_arg(data_arg);
  auto data = sfe::load_dataset(spec);
  EvalData out;
  out.test = std::move(data.test);
  if (ckpt.config.normalization) {
    out.stats = *ckpt.config.normalization;
  } else {
    out.stats = sfe::compute_channel_stats(data.train);
  }
  return out;
}

int run_train(const std::string& config_path, const std::string& out_dir,
              bool has_seed, std::uint64_t seed, const std::string& resume,
              int max_epochs) {
  auto config = sfe::load_config_file(config_path);
  if (has_seed) {
    config.model_seed = seed;
    config.data_seed = sfe::derive_seed(seed, 1);
    config.partition_seed = sfe::derive_seed(seed, 2);
  }
  emit_resolved_config(config);
  sfe::TrainOptions options;
  options.out_dir = out_dir;
  options.resume_from = resume;
  options.max_epochs_this_run = max_epochs;
  auto result = sfe::train_experiment(std::move(config), options);
  const auto& last = result.records.back();
  json summary{{"out_dir", out_dir},
               {"checkpoint", result.checkpoint_path},
               {"metrics", result.metrics_path},
               {"epochs", last.epoch + 1},
               {"train_loss", last.train_loss},
               {"acc_si", last.acc_si},
               {"acc_ag", last.acc_ag}};
  if (last.acc_sd) summary["acc_sd"] = *last.acc_sd;
  std::cout << summary.dump() << "\n";
  return kExitOk;
}

int run_eval(const std::string& checkpoint_path, const std::string& scheme_name,
             const std::string& data_arg) {
  const auto scheme = sfe::scheme_from_string(scheme_name);
  auto ckpt = sfe::load_checkpoint(checkpoint_path);
  emit_resolved_config(ckpt.config);
  auto data = eval_data_for(ckpt, data_arg);
  const double accuracy = sfe::evaluate_accuracy(
      *ckpt.model, data.test, data.stats, scheme, ckpt.config.eval_batch);
  json out{{"scheme", scheme_name},
           {"accuracy", accuracy},
           {"n", data.test.size()}};
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int run_sweep_cmd(const std::string& grid_path, const std::string& out_csv,
                  int jobs) {
  auto grid = sfe::load_sweep_grid(grid_path);
  emit_resolved_config(grid.base);
  auto rows = sfe::run_sweep(grid, jobs);
  sfe::write_sweep_csv(out_csv, rows);
  int failures = 0;
  for (const auto& row : rows)
    if (row.status != "ok") ++failures;
  json out{{"csv", out_csv}, {"cells", rows.size()}, {"failed", failures}};
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int run_cam(const std::string& checkpoint_path, int image_index, int class_id,
            const std::string& out_path, const std::string& data_arg) {
  auto ckpt = sfe::load_checkpoint(checkpoint_path);
  emit_resolved_config(ckpt.config);
  auto data = eval_data_for(ckpt, data_arg);
  if (image_index < 0 || image_index >= data.test.size()) {
    throw sfe::ConfigError("--image " + std::to_string(image_index) +
                           " outside the test set of " +
                           std::to_string(data.test.size()) + " images");
  }
  if (class_id < 0) class_id = data.test.labels[static_cast<std::size_t>(image_index)];
  auto pixels = sfe::normalize_image(data.test.image(image_index),
                                     data.test.channels, data.test.height,
                                     data.test.width, data.stats);
  auto x = sfe::Tensor<float>::from_data(
      {1, data.test.channels, data.test.height, data.test.width}, pixels);
  auto cam = sfe::compute_cam(*ckpt.model, x, class_id, image_index);
  sfe::export_cam_pgm(cam, out_path);
  json out{{"out", out_path},
           {"class", class_id},
           {"image", image_index},
           {"weight_source", cam.weight_source},
           {"height", cam.height},
           {"width", cam.width}};
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int run_inspect(const std::string& checkpoint_path) {
  auto ckpt = sfe::load_checkpoint(checkpoint_path);
  emit_resolved_config(ckpt.config);
  json heads = json::array();
  for (const auto& att : ckpt.model->attachments()) {
    heads.push_back({{"stage", att.stage + 1},
                     {"in_features", att.head.fc.weight.shape()[1]},
                     {"out_features", att.head.fc.weight.shape()[0]},
                     {"partition", json::parse(att.partition.to_json())}});
  }
  json out{{"epoch", ckpt.epochs_completed},
           {"mode", sfe::attachment_mode_name(ckpt.config.plan.mode)},
           {"K", ckpt.config.plan.num_transforms()},
           {"k", ckpt.config.plan.k},
           {"beta", ckpt.config.plan.beta},
           {"distill", ckpt.config.plan.distill},
           {"single_head", ckpt.model->single_head().has_value()},
           {"heads", heads},
           {"config_hash", sfe::config_hash_hex(ckpt.config)}};
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-masking self-supervised feature enhancement harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "sfe_run", resume, data_arg;
  std::uint64_t seed = 0;
  bool has_seed = false;
  int max_epochs = 0;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "Experiment config (JSON)")
      ->required();
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--seed", seed, "Override all seeds from one base seed")
      ->each([&has_seed](const std::string&) { has_seed = true; });
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--max-epochs", max_epochs,
                    "Stop after this many epochs this run (resumable)");

  std::string checkpoint_path, scheme_name;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  eval->add_option("--scheme", scheme_name, "Inference scheme: si, ag or sd")
      ->required();
  eval->add_option("--data", data_arg,
                   "Dataset spec (inline JSON or a path); defaults to the "
                   "checkpoint's dataset");

  std::string grid_path, csv_path;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a grid of experiments");
  sweep->add_option("--grid", grid_path, "Sweep grid (JSON)")->required();
  sweep->add_option("--out", csv_path, "Output CSV path")->required();
  sweep->add_option("--jobs", jobs, "Parallel cells");

  int image_index = 0, class_id = -1;
  std::string pgm_path;
  auto* cam = app.add_subcommand("cam", "Export a class activation map");
  cam->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  cam->add_option("--image", image_index, "Test-set image index")->required();
  cam->add_option("--class", class_id, "Class id (defaults to the image label)");
  cam->add_option("--out", pgm_path, "Output PGM path")->required();
  cam->add_option("--data", data_arg, "Dataset spec override");

  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
  inspect->add_option("--checkpoint", checkpoint_path, "Checkpoint path")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return run_train(config_path, out_dir, has_seed, seed, resume, max_epochs);
    }
    if (eval->parsed()) {
      return run_eval(checkpoint_path, scheme_name, data_arg);
    }
    if (sweep->parsed()) {
      return run_sweep_cmd(grid_path, csv_path, jobs);
    }
    if (cam->parsed()) {
      return run_cam(checkpoint_path, image_index, class_id, pgm_path, data_arg);
    }
    if (inspect->parsed()) {
      return run_inspect(checkpoint_path);
    }
  } catch (const sfe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const sfe::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const sfe::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
