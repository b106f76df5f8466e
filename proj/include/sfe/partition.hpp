#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sfe/errors.hpp"
#include "sfe/ops.hpp"
#include "sfe/tensor.hpp"

namespace sfe {

// A fixed random split of C channels into k disjoint groups. Transform id
// j = 0 keeps the feature map intact; j in [1, k] zeroes group j-1. The
// partition is drawn once at model construction and never resampled, so the
// self-supervised labels stay learnable.
struct ChannelPartition {
  int channel_count = 0;
  int group_count = 0;
  std::vector<int> permutation;  // bijection over [0, channel_count)

  // K: the masked variants plus the identity.
  int num_transforms() const { return group_count + 1; }

  // Group g owns permutation[floor(g*C/k) .. floor((g+1)*C/k)).
  std::pair<int, int> group_bounds(int g) const;
  std::vector<int> group(int g) const;

  // Per-channel {0,1} vector realizing transform j >= 1; entry c is 0 iff
  // channel c belongs to group j-1.
  std::vector<std::uint8_t> mask_for(int j) const;

  std::string to_json() const;
  static ChannelPartition from_json(const std::string& text);
};

ChannelPartition make_partition(int channel_count, int group_count,
                                std::mt19937_64& rng);
ChannelPartition make_partition(int channel_count, int group_count,
                                std::uint64_t seed);

// j = 0 returns f unchanged; j >= 1 zeroes the channels of group j-1.
// Gradient flows only through the surviving channels.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& f, const ChannelPartition& partition,
                          int j) {
  if (f.rank() != 4 || f.dim(1) != partition.channel_count) {
    throw ConfigError("apply_transform: feature has " +
                      std::to_string(f.rank() == 4 ? f.dim(1) : -1) +
                      " channels, partition covers " +
                      std::to_string(partition.channel_count));
  }
  if (j == 0) return f;
  return ops::channel_mask(f, partition.mask_for(j));
}

// The K*B stack fed to a joint head: block layout [all j=0 rows; all j=1
// rows; ...; all j=k rows], each block in sample order.
template <typename T>
struct ExpandedBatch {
  Tensor<T> rows;          // [K*B, C, H, W]
  int batch = 0;           // B
  int num_transforms = 0;  // K

  std::pair<int, int> source_of(int row) const {
    return {row % batch, row / batch};
  }
  int row_of(int sample, int j) const { return j * batch + sample; }
};

template <typename T>
ExpandedBatch<T> expand_batch(const Tensor<T>& f,
                              const ChannelPartition& partition) {
  const int k = partition.group_count;
  std::vector<Tensor<T>> blocks;
  blocks.reserve(static_cast<std::size_t>(k) + 1);
  blocks.push_back(f);
  for (int j = 1; j <= k; ++j) {
    blocks.push_back(apply_transform(f, partition, j));
  }
  return ExpandedBatch<T>{ops::concat_rows(blocks), f.dim(0),
                          partition.num_transforms()};
}

}  // namespace sfe
