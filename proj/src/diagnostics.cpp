#include "sfe/diagnostics.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace sfe {

using nlohmann::json;

CamMap cam_from_feature(std::span<const float> feature, int channels,
                        int height, int width, std::span<const float> weights) {
  if (static_cast<int>(weights.size()) != channels ||
      static_cast<std::size_t>(channels) * height * width != feature.size()) {
    throw ConfigError("cam_from_feature: shape mismatch");
  }
  CamMap cam;
  cam.height = height;
  cam.width = width;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  cam.values.assign(plane, 0.0f);
  for (int c = 0; c < channels; ++c) {
    const float w = weights[static_cast<std::size_t>(c)];
    const float* src = feature.data() + static_cast<std::size_t>(c) * plane;
    for (std::size_t s = 0; s < plane; ++s) cam.values[s] += w * src[s];
  }
  float lo = cam.values[0], hi = cam.values[0];
  for (float v : cam.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (auto& v : cam.values) v = (v - lo) * inv;
  } else {
    for (auto& v : cam.values) v = 0.0f;
  }
  return cam;
}

CamMap compute_cam(SfeModel<float>& model, const Tensor<float>& x,
                   int class_id, int image_id) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw ConfigError("compute_cam expects a single [1,C,H,W] image");
  }
  if (class_id < 0 || class_id >= model.config().num_classes) {
    throw ConfigError("cam class " + std::to_string(class_id) + " outside [0," +
                      std::to_string(model.config().num_classes) + ")");
  }
  NoGradGuard guard;
  auto feature = model.trunk_feature(x, false);
  if (model.masked_partition()) {
    // A masked-baseline classifier only ever sees the masked feature.
    feature = apply_transform(feature, *model.masked_partition(),
                              model.plan().masked_group + 1);
  }
  const int channels = feature.dim(1);
  const int height = feature.dim(2);
  const int width = feature.dim(3);

  std::vector<float> weights(static_cast<std::size_t>(channels));
  std::string source;
  if (model.single_head()) {
    const auto& w = model.single_head()->fc.weight;  // [N, C]
    for (int c = 0; c < channels; ++c) {
      weights[static_cast<std::size_t>(c)] =
          w.values()[static_cast<std::size_t>(class_id) * channels + c];
    }
    source = "single";
  } else if (!model.attachments().empty()) {
    const auto& att = model.attachments().back();
    const auto& w = att.head.fc.weight;  // [N*K, C]
    const int row = class_id * att.head.num_transforms;  // identity column
    for (int c = 0; c < channels; ++c) {
      weights[static_cast<std::size_t>(c)] =
          w.values()[static_cast<std::size_t>(row) * channels + c];
    }
    source = "joint_identity";
  } else {
    throw ConfigError("model has no classifier to take CAM weights from");
  }

  auto cam = cam_from_feature(feature.values(), channels, height, width, weights);
  cam.class_id = class_id;
  cam.image_id = image_id;
  cam.weight_source = source;
  return cam;
}

void export_cam_pgm(const CamMap& cam, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P5\n" << cam.width << " " << cam.height << "\n255\n";
  for (float v : cam.values) {
    const int q = static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    out.put(static_cast<char>(q));
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

SweepGrid sweep_grid_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("sweep grid must be a JSON object");
  SweepGrid grid;
  if (auto it = j.find("base"); it != j.end()) {
    grid.base = config_from_json(*it);
  } else {
    grid.base = config_from_json(json::object());
  }
  if (auto it = j.find("vary"); it != j.end()) {
    const json& vary = *it;
    try {
      if (vary.contains("mode")) grid.modes = vary["mode"].get<std::vector<std::string>>();
      if (vary.contains("k")) grid.ks = vary["k"].get<std::vector<int>>();
      if (vary.contains("beta")) grid.betas = vary["beta"].get<std::vector<double>>();
      if (vary.contains("seed"))
        grid.seeds = vary["seed"].get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("sweep grid: ") + e.what());
    }
  }
  if (grid.modes.empty() || grid.ks.empty() || grid.seeds.empty()) {
    throw ConfigError("sweep grid axes must be nonempty");
  }
  return grid;
}

SweepGrid load_sweep_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sweep grid '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("sweep grid '" + path + "' is not valid JSON: " + e.what());
  }
  return sweep_grid_from_json(j);
}

namespace {

// Mode tokens: "two_classifier", "baseline", ... or "single_layer:<L>".
std::pair<std::string, int> parse_mode_token(const std::string& token) {
  const auto colon = token.find(':');
  if (colon == std::string::npos) return {token, -1};
  const std::string name = token.substr(0, colon);
  int layer = 0;
  try {
    layer = std::stoi(token.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad mode token '" + token + "'");
  }
  return {name, layer};
}

ExperimentConfig cell_config(const SweepGrid& grid, const SweepCell& cell) {
  ExperimentConfig cfg = grid.base;
  cfg.plan.mode = attachment_mode_from_string(cell.mode);
  if (cell.attach_layer > 0) cfg.plan.attach_layer = cell.attach_layer;
  cfg.plan.k = cell.k;
  cfg.plan.beta = cell.beta;
  cfg.model_seed = cell.seed;
  cfg.data_seed = derive_seed(cell.seed, 1);
  cfg.partition_seed = derive_seed(cell.seed, 2);
  return cfg;
}

std::string sanitize_csv(std::string text) {
  for (auto& c : text) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return text;
}

}  // namespace

std::vector<SweepCell> expand_grid(const SweepGrid& grid) {
  std::vector<double> betas = grid.betas;
  if (betas.empty()) betas = {grid.base.plan.beta};
  std::vector<SweepCell> cells;
  for (const auto& mode_token : grid.modes) {
    const auto [mode, layer] = parse_mode_token(mode_token);
    attachment_mode_from_string(mode);  // validate early
    for (int k : grid.ks) {
      for (double beta : betas) {
        for (std::uint64_t seed : grid.seeds) {
          SweepCell cell;
          cell.mode = mode;
          cell.attach_layer = layer;
          cell.k = k;
          cell.beta = beta;
          cell.seed = seed;
          cells.push_back(cell);
        }
      }
    }
  }
  return cells;
}

std::vector<SweepRow> run_sweep(const SweepGrid& grid, int jobs) {
  const auto cells = expand_grid(grid);
  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) break;
      SweepRow row;
      row.cell = cells[i];
      try {
        auto cfg = cell_config(grid, cells[i]);
        auto result = train_experiment(cfg);
        const auto& last = result.records.back();
        row.acc_si = last.acc_si;
        row.acc_ag = last.acc_ag;
        double wall = 0.0;
        for (const auto& r : result.records) wall += r.wall_ms_per_iter;
        row.wall_ms = wall / static_cast<double>(result.records.size());
      } catch (const std::exception& e) {
        row.status = "error: " + sanitize_csv(e.what());
      }
      rows[i] = std::move(row);
    }
  };
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(jobs));
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

std::string sweep_csv_header() {
  return "k,layer,mode,beta,seed,acc_si,acc_ag,wall_ms,status";
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << sweep_csv_header() << "\n";
  for (const auto& row : rows) {
    out << row.cell.k << "," << row.cell.attach_layer << "," << row.cell.mode
        << "," << row.cell.beta << "," << row.cell.seed << ",";
    if (row.status == "ok") {
      out << row.acc_si << "," << row.acc_ag << "," << row.wall_ms;
    } else {
      out << ",,";
    }
    out << "," << row.status << "\n";
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace sfe
