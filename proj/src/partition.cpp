#include "sfe/partition.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace sfe {

std::pair<int, int> ChannelPartition::group_bounds(int g) const {
  if (g < 0 || g >= group_count) {
    throw ConfigError("partition group " + std::to_string(g) +
                      " outside [0," + std::to_string(group_count) + ")");
  }
  const auto c = static_cast<std::int64_t>(channel_count);
  const int lo = static_cast<int>(g * c / group_count);
  const int hi = static_cast<int>((g + 1) * c / group_count);
  return {lo, hi};
}

std::vector<int> ChannelPartition::group(int g) const {
  auto [lo, hi] = group_bounds(g);
  return std::vector<int>(permutation.begin() + lo, permutation.begin() + hi);
}

std::vector<std::uint8_t> ChannelPartition::mask_for(int j) const {
  if (j < 1 || j >= num_transforms()) {
    throw ConfigError("mask_for: transform " + std::to_string(j) +
                      " has no mask (valid ids are 1.." +
                      std::to_string(group_count) + ")");
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(channel_count), 1);
  auto [lo, hi] = group_bounds(j - 1);
  for (int i = lo; i < hi; ++i) mask[static_cast<std::size_t>(permutation[i])] = 0;
  return mask;
}

std::string ChannelPartition::to_json() const {
  nlohmann::json j{{"channel_count", channel_count},
                   {"group_count", group_count},
                   {"permutation", permutation}};
  return j.dump();
}

ChannelPartition ChannelPartition::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("partition json: ") + e.what());
  }
  ChannelPartition p;
  try {
    p.channel_count = j.at("channel_count").get<int>();
    p.group_count = j.at("group_count").get<int>();
    p.permutation = j.at("permutation").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("partition json: ") + e.what());
  }
  if (p.group_count < 1 || p.group_count > p.channel_count ||
      static_cast<int>(p.permutation.size()) != p.channel_count) {
    throw DataError("partition json: inconsistent sizes");
  }
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(p.channel_count), 0);
  for (int c : p.permutation) {
    if (c < 0 || c >= p.channel_count || seen[static_cast<std::size_t>(c)]) {
      throw DataError("partition json: permutation is not a bijection");
    }
    seen[static_cast<std::size_t>(c)] = 1;
  }
  return p;
}

ChannelPartition make_partition(int channel_count, int group_count,
                                std::mt19937_64& rng) {
  if (group_count < 1 || group_count > channel_count) {
    throw ConfigError("make_partition: need 1 <= k <= C, got k=" +
                      std::to_string(group_count) + " C=" +
                      std::to_string(channel_count));
  }
  ChannelPartition p;
  p.channel_count = channel_count;
  p.group_count = group_count;
  p.permutation.resize(static_cast<std::size_t>(channel_count));
  std::iota(p.permutation.begin(), p.permutation.end(), 0);
  std::shuffle(p.permutation.begin(), p.permutation.end(), rng);
  return p;
}

ChannelPartition make_partition(int channel_count, int group_count,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return make_partition(channel_count, group_count, rng);
}

}  // namespace sfe
