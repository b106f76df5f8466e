#include "sfe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace sfe {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr int kCifarClasses = 10;
constexpr std::size_t kCifarRecord = 1 + 3072;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw DataError("short read from '" + path + "'");
  return bytes;
}

}  // namespace

LabeledImageDataset parse_cifar10_bin(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw DataError("'" + path + "' is not a CIFAR-10 binary file: " +
                    std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3073");
  }
  const int count = static_cast<int>(bytes.size() / kCifarRecord);
  LabeledImageDataset ds;
  ds.num_classes = kCifarClasses;
  ds.channels = kCifarChannels;
  ds.height = kCifarDim;
  ds.width = kCifarDim;
  ds.labels.reserve(static_cast<std::size_t>(count));
  ds.images.resize(static_cast<std::size_t>(count) * 3072);
  for (int i = 0; i < count; ++i) {
    const std::uint8_t label = bytes[static_cast<std::size_t>(i) * kCifarRecord];
    if (label >= kCifarClasses) {
      throw DataError("'" + path + "' record " + std::to_string(i) +
                      " has corrupt label byte " + std::to_string(label));
    }
    ds.labels.push_back(label);
    std::memcpy(ds.images.data() + static_cast<std::size_t>(i) * 3072,
                bytes.data() + static_cast<std::size_t>(i) * kCifarRecord + 1,
                3072);
  }
  return ds;
}

LabeledImageDataset load_cifar10_files(const std::vector<std::string>& paths,
                                       int limit) {
  if (paths.empty()) throw DataError("no CIFAR-10 files given");
  LabeledImageDataset all;
  for (const auto& path : paths) {
    auto part = parse_cifar10_bin(path);
    if (all.size() == 0) {
      all = std::move(part);
    } else {
      all.images.insert(all.images.end(), part.images.begin(), part.images.end());
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    }
    if (limit >= 0 && all.size() >= limit) break;
  }
  if (limit >= 0 && all.size() > limit) {
    all.labels.resize(static_cast<std::size_t>(limit));
    all.images.resize(static_cast<std::size_t>(limit) * all.image_bytes());
  }
  return all;
}

void write_cifar10_bin(const std::string& path,
                       const LabeledImageDataset& dataset) {
  if (dataset.channels != kCifarChannels || dataset.height != kCifarDim ||
      dataset.width != kCifarDim || dataset.num_classes != kCifarClasses) {
    throw ConfigError("write_cifar10_bin needs 10-class 3x32x32 data");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (int i = 0; i < dataset.size(); ++i) {
    const auto label = static_cast<char>(dataset.labels[static_cast<std::size_t>(i)]);
    out.put(label);
    const auto img = dataset.image(i);
    out.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size()));
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

LabeledImageDataset synth_dataset(int num_classes, int per_class, int channels,
                                  int height, int width, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synth_dataset needs at least 2 classes");
  if (per_class < 1 || channels < 1 || height < 1 || width < 1) {
    throw ConfigError("synth_dataset: degenerate dimensions");
  }
  LabeledImageDataset ds;
  ds.num_classes = num_classes;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  const std::size_t image_bytes =
      static_cast<std::size_t>(channels) * height * width;
  ds.images.resize(static_cast<std::size_t>(num_classes) * per_class * image_bytes);
  ds.labels.resize(static_cast<std::size_t>(num_classes) * per_class);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> amp_dist(0.6, 1.0);
  std::normal_distribution<double> noise(0.0, 0.12);

  int index = 0;
  for (int c = 0; c < num_classes; ++c) {
    // Class template: orientation, spatial frequency and channel colouring
    // depend only on the class id.
    const double theta = M_PI * c / num_classes;
    const double freq = 1.0 + (c % 3);
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    std::vector<double> colour(static_cast<std::size_t>(channels));
    for (int ch = 0; ch < channels; ++ch) {
      colour[static_cast<std::size_t>(ch)] =
          0.35 + 0.65 * ((c + ch) % channels) / std::max(1, channels - 1);
    }
    for (int s = 0; s < per_class; ++s, ++index) {
      const double phase = phase_dist(rng);
      const double amp = amp_dist(rng);
      std::uint8_t* img =
          ds.images.data() + static_cast<std::size_t>(index) * image_bytes;
      for (int ch = 0; ch < channels; ++ch) {
        for (int y = 0; y < height; ++y) {
          for (int x = 0; x < width; ++x) {
            const double u = (x * cos_t + y * sin_t) / width;
            double v = 0.5 + 0.5 * amp * colour[static_cast<std::size_t>(ch)] *
                                 std::sin(2.0 * M_PI * freq * u + phase) +
                       noise(rng);
            v = std::clamp(v, 0.0, 1.0);
            img[(static_cast<std::size_t>(ch) * height + y) * width + x] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
          }
        }
      }
      ds.labels[static_cast<std::size_t>(index)] = c;
    }
  }
  return ds;
}

ChannelStats compute_channel_stats(const LabeledImageDataset& dataset) {
  if (dataset.size() == 0) throw DataError("stats of an empty dataset");
  ChannelStats stats;
  stats.mean.assign(static_cast<std::size_t>(dataset.channels), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(dataset.channels), 0.0);
  const std::size_t plane = static_cast<std::size_t>(dataset.height) * dataset.width;
  const std::size_t count = static_cast<std::size_t>(dataset.size()) * plane;
  for (int i = 0; i < dataset.size(); ++i) {
    const auto img = dataset.image(i);
    for (int ch = 0; ch < dataset.channels; ++ch) {
      double acc = 0.0;
      for (std::size_t s = 0; s < plane; ++s) {
        acc += img[static_cast<std::size_t>(ch) * plane + s] / 255.0;
      }
      stats.mean[static_cast<std::size_t>(ch)] += acc;
    }
  }
  for (auto& m : stats.mean) m /= static_cast<double>(count);
  for (int i = 0; i < dataset.size(); ++i) {
    const auto img = dataset.image(i);
    for (int ch = 0; ch < dataset.channels; ++ch) {
      double acc = 0.0;
      for (std::size_t s = 0; s < plane; ++s) {
        const double d = img[static_cast<std::size_t>(ch) * plane + s] / 255.0 -
                         stats.mean[static_cast<std::size_t>(ch)];
        acc += d * d;
      }
      stats.stddev[static_cast<std::size_t>(ch)] += acc;
    }
  }
  for (auto& s : stats.stddev) {
    s = std::sqrt(s / static_cast<double>(count));
    s = std::max(s, 1e-6);
  }
  return stats;
}

AugmentParams sample_augment_params(std::mt19937_64& rng) {
  AugmentParams params;
  params.offset_y = static_cast<int>(rng() % (2 * kAugmentPad + 1));
  params.offset_x = static_cast<int>(rng() % (2 * kAugmentPad + 1));
  params.flip = (rng() & 1) != 0;
  return params;
}

std::vector<float> augment_image(std::span<const std::uint8_t> image,
                                 int channels, int height, int width,
                                 const AugmentParams& params,
                                 const ChannelStats& stats) {
  if (params.offset_y < 0 || params.offset_y > 2 * kAugmentPad ||
      params.offset_x < 0 || params.offset_x > 2 * kAugmentPad) {
    throw ConfigError("augment offsets outside the padded image");
  }
  std::vector<float> out(static_cast<std::size_t>(channels) * height * width);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int ch = 0; ch < channels; ++ch) {
    const float mean = static_cast<float>(stats.mean[static_cast<std::size_t>(ch)]);
    const float inv_std =
        1.0f / static_cast<float>(stats.stddev[static_cast<std::size_t>(ch)]);
    for (int y = 0; y < height; ++y) {
      const int src_y = y + params.offset_y - kAugmentPad;
      for (int x = 0; x < width; ++x) {
        const int crop_x = params.flip ? width - 1 - x : x;
        const int src_x = crop_x + params.offset_x - kAugmentPad;
        float v = 0.0f;  // zero padding
        if (src_y >= 0 && src_y < height && src_x >= 0 && src_x < width) {
          v = image[(static_cast<std::size_t>(ch) * height + src_y) * width +
                    src_x] /
              255.0f;
        }
        out[static_cast<std::size_t>(ch) * plane +
            static_cast<std::size_t>(y) * width + x] = (v - mean) * inv_std;
      }
    }
  }
  return out;
}

std::vector<float> normalize_image(std::span<const std::uint8_t> image,
                                   int channels, int height, int width,
                                   const ChannelStats& stats) {
  AugmentParams centered;
  centered.offset_y = kAugmentPad;
  centered.offset_x = kAugmentPad;
  centered.flip = false;
  return augment_image(image, channels, height, width, centered, stats);
}

std::vector<int> epoch_order(int dataset_size, std::uint64_t data_seed,
                             int epoch) {
  std::vector<int> order(static_cast<std::size_t>(dataset_size));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(data_seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::mt19937_64 epoch_augment_rng(std::uint64_t data_seed, int epoch) {
  return std::mt19937_64(
      derive_seed(data_seed ^ 0xa0610ca1ULL, static_cast<std::uint64_t>(epoch)));
}

namespace {

constexpr char kContainerMagic[4] = {'S', 'F', 'T', 'C'};

std::uint8_t dtype_code(const std::string& dtype) {
  if (dtype == "float32") return 1;
  if (dtype == "float64") return 2;
  if (dtype == "uint8") return 3;
  throw ConfigError("tensor container dtype '" + dtype + "' not supported");
}

std::string dtype_name(std::uint8_t code) {
  switch (code) {
    case 1:
      return "float32";
    case 2:
      return "float64";
    case 3:
      return "uint8";
  }
  throw DataError("tensor container has unknown dtype code " +
                  std::to_string(code));
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "float32") return 4;
  if (dtype == "float64") return 8;
  return 1;
}

}  // namespace

void write_tensor_container(const std::string& path,
                            const TensorContainerData& data,
                            const std::string& description) {
  std::int64_t count = 1;
  for (int d : data.shape) count *= d;
  if (static_cast<std::size_t>(count) * dtype_size(data.dtype) !=
      data.payload.size()) {
    throw ConfigError("tensor container payload does not match its shape");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(kContainerMagic, 4);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint8_t code = dtype_code(data.dtype);
  const std::uint8_t rank = static_cast<std::uint8_t>(data.shape.size());
  const std::uint16_t reserved = 0;
  out.write(reinterpret_cast<const char*>(&code), 1);
  out.write(reinterpret_cast<const char*>(&rank), 1);
  out.write(reinterpret_cast<const char*>(&reserved), 2);
  for (int d : data.shape) {
    const std::uint64_t extent = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&extent), 8);
  }
  out.write(reinterpret_cast<const char*>(data.payload.data()),
            static_cast<std::streamsize>(data.payload.size()));
  if (!out) throw IoError("short write to '" + path + "'");

  nlohmann::json sidecar{{"dtype", data.dtype},
                         {"shape", data.shape},
                         {"description", description}};
  std::ofstream meta(path + ".json");
  if (!meta) throw IoError("cannot write '" + path + ".json'");
  meta << sidecar.dump(2) << "\n";
}

TensorContainerData read_tensor_container(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw DataError("'" + path + "' is not a tensor container (bad magic)");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != 1) {
    throw DataError("tensor container version " + std::to_string(version) +
                    " not supported");
  }
  TensorContainerData data;
  data.dtype = dtype_name(bytes[8]);
  const int rank = bytes[9];
  std::size_t offset = 12;
  std::int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    if (offset + 8 > bytes.size()) throw DataError("tensor container truncated");
    std::uint64_t extent = 0;
    std::memcpy(&extent, bytes.data() + offset, 8);
    offset += 8;
    data.shape.push_back(static_cast<int>(extent));
    count *= static_cast<std::int64_t>(extent);
  }
  const std::size_t want = static_cast<std::size_t>(count) * dtype_size(data.dtype);
  if (bytes.size() - offset != want) {
    throw DataError("tensor container payload is " +
                    std::to_string(bytes.size() - offset) + " bytes, header promises " +
                    std::to_string(want));
  }
  data.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                      bytes.end());
  return data;
}

}  // namespace sfe
