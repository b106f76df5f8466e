#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfe/trainer.hpp"

namespace sfe {

// Class activation map: classifier-weighted sum of last-stage feature
// channels, min-max normalized to [0,1] (constant maps collapse to zeros).
struct CamMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major, in [0,1]
  int class_id = 0;
  int image_id = 0;
  std::string weight_source;  // "single" or "joint_identity"
};

// Weighted channel sum over a [C,H,W] feature block, then normalization.
CamMap cam_from_feature(std::span<const float> feature, int channels,
                        int height, int width, std::span<const float> weights);

// CAM for one input image [1,C,H,W]. Weights come from the single
// classifier when the model has one, otherwise from the identity column of
// the last joint head.
CamMap compute_cam(SfeModel<float>& model, const Tensor<float>& x,
                   int class_id, int image_id = 0);

// 8-bit binary PGM (P5), values round(cam * 255).
void export_cam_pgm(const CamMap& cam, const std::string& path);

// One sweep cell: a full train/eval cycle at modified plan settings.
struct SweepCell {
  std::string mode;     // attachment mode name; single_layer carries a layer
  int attach_layer = 0; // valid for single_layer cells, else -1
  int k = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
};

struct SweepRow {
  SweepCell cell;
  double acc_si = 0.0;
  double acc_ag = 0.0;
  double wall_ms = 0.0;
  std::string status = "ok";
};

struct SweepGrid {
  ExperimentConfig base;
  std::vector<std::string> modes = {"two_classifier"};  // "single_layer:2" etc.
  std::vector<int> ks = {4};
  std::vector<double> betas;            // empty keeps the base beta
  std::vector<std::uint64_t> seeds = {0};
};

SweepGrid sweep_grid_from_json(const nlohmann::json& j);
SweepGrid load_sweep_grid(const std::string& path);

// Expands the grid in deterministic (mode, k, beta, seed) order.
std::vector<SweepCell> expand_grid(const SweepGrid& grid);

// Runs every cell; failures are recorded with an error status and the sweep
// continues. Cells may run on up to `jobs` threads over independent models;
// row order always matches expand_grid.
std::vector<SweepRow> run_sweep(const SweepGrid& grid, int jobs = 1);

std::string sweep_csv_header();
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace sfe
