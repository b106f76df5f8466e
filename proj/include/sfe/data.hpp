#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sfe/errors.hpp"
#include "sfe/tensor.hpp"

namespace sfe {

struct LabeledImageDataset {
  int num_classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> images;  // [M, C, H, W] row-major
  std::vector<int> labels;           // [M], each in [0, num_classes)

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const std::uint8_t> image(int index) const {
    return {images.data() + static_cast<std::size_t>(index) * image_bytes(),
            image_bytes()};
  }
};

// CIFAR-10 binary records: 1 label byte then 3072 pixel bytes (the red
// 32x32 plane, then green, then blue, each row-major).
LabeledImageDataset parse_cifar10_bin(const std::string& path);
LabeledImageDataset load_cifar10_files(const std::vector<std::string>& paths,
                                       int limit = -1);
void write_cifar10_bin(const std::string& path,
                       const LabeledImageDataset& dataset);

// Procedural dataset: each class is a distinct oriented grating with a
// class-specific channel colouring; the phase is random per sample, so the
// classes are not linearly separable in pixel space but a small CNN learns
// them quickly. Deterministic per seed.
LabeledImageDataset synth_dataset(int num_classes, int per_class, int channels,
                                  int height, int width, std::uint64_t seed);

struct ChannelStats {
  std::vector<double> mean;    // of pixel values scaled to [0,1]
  std::vector<double> stddev;  // floored away from zero
};

ChannelStats compute_channel_stats(const LabeledImageDataset& dataset);

struct AugmentParams {
  int offset_y = 0;  // crop origin inside the padded image
  int offset_x = 0;
  bool flip = false;
};

inline constexpr int kAugmentPad = 4;

AugmentParams sample_augment_params(std::mt19937_64& rng);

// Zero-pad by kAugmentPad, crop back to the original size at the given
// offsets, optionally mirror horizontally, then scale to [0,1] and normalize
// per channel.
std::vector<float> augment_image(std::span<const std::uint8_t> image,
                                 int channels, int height, int width,
                                 const AugmentParams& params,
                                 const ChannelStats& stats);

// Evaluation path: scale and normalize only.
std::vector<float> normalize_image(std::span<const std::uint8_t> image,
                                   int channels, int height, int width,
                                   const ChannelStats& stats);

// Sample visit order for one epoch; a pure function of (seed, epoch).
std::vector<int> epoch_order(int dataset_size, std::uint64_t data_seed,
                             int epoch);

// Per-epoch augmentation stream, decorrelated from the shuffle stream.
std::mt19937_64 epoch_augment_rng(std::uint64_t data_seed, int epoch);

// Simple self-describing tensor file: "SFTC" magic, version, dtype code,
// rank, little-endian u64 extents, raw little-endian payload. A JSON sidecar
// `<path>.json` mirrors dtype/shape for humans.
struct TensorContainerData {
  std::string dtype;  // "float32" | "float64" | "uint8"
  std::vector<int> shape;
  std::vector<std::uint8_t> payload;
};

void write_tensor_container(const std::string& path,
                            const TensorContainerData& data,
                            const std::string& description = "");
TensorContainerData read_tensor_container(const std::string& path);

template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& tensor,
                  const std::string& description = "") {
  TensorContainerData data;
  data.dtype = sizeof(T) == 4 ? "float32" : "float64";
  data.shape = tensor.shape();
  data.payload.resize(tensor.values().size() * sizeof(T));
  std::memcpy(data.payload.data(), tensor.values().data(), data.payload.size());
  write_tensor_container(path, data, description);
}

template <typename T>
Tensor<T> read_tensor(const std::string& path) {
  const auto data = read_tensor_container(path);
  const std::string want = sizeof(T) == 4 ? "float32" : "float64";
  if (data.dtype != want) {
    throw DataError("tensor container holds " + data.dtype + ", expected " + want);
  }
  std::vector<T> values(data.payload.size() / sizeof(T));
  std::memcpy(values.data(), data.payload.data(), data.payload.size());
  return Tensor<T>::from_data(data.shape, std::move(values));
}

}  // namespace sfe
