#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/noise.hpp"

namespace prosub {

// Per prunable layer: a prune order (first-to-prune first) and its partition
// into contiguous groups of size ceil(p/G) (last group may be smaller).
struct ChannelRanking {
  std::map<int, std::vector<int>> order;               // layer -> permutation of {0..p-1}
  std::map<int, std::vector<std::vector<int>>> groups;  // layer -> contiguous blocks over order
};

namespace detail {

inline std::vector<std::vector<int>> partition_groups(const std::vector<int>& order, int g) {
  const int p = static_cast<int>(order.size());
  const int size = (p + g - 1) / g;  // ceil(p/G)
  std::vector<std::vector<int>> out;
  for (int start = 0; start < p; start += size)
    out.emplace_back(order.begin() + start, order.begin() + std::min(start + size, p));
  return out;
}

// Sorts channel indices by key; equal keys break toward the higher index.
template <typename Key>
std::vector<int> sort_channels(int p, Key key, bool descending) {
  std::vector<int> idx(p);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    double ka = key(a), kb = key(b);
    if (ka != kb) return descending ? ka > kb : ka < kb;
    return a > b;
  });
  return idx;
}

}  // namespace detail

// Channels with larger |beta| are pruned first; ties go to the higher index.
inline ChannelRanking extract_ranking(const NoiseParams& np, int group_count) {
  if (group_count < 1) throw ConfigError("group count must be >= 1");
  ChannelRanking r;
  for (const auto& [layer, beta] : np.beta) {
    std::vector<int> order = detail::sort_channels(
        static_cast<int>(beta.numel()),
        [&](int c) { return std::abs(static_cast<double>(beta.data[c])); }, /*descending=*/true);
    r.groups[layer] = detail::partition_groups(order, group_count);
    r.order[layer] = std::move(order);
  }
  return r;
}

// Baseline: channels with the smallest L1 weight norm are pruned first; same
// tie-break and grouping as the noise ranking.
inline ChannelRanking l1_ranking(const ModelGraph& m, int group_count) {
  if (group_count < 1) throw ConfigError("group count must be >= 1");
  ChannelRanking r;
  for (int layer : prunable_layers(m)) {
    const Tensor& w = m.param(layer, "weight");
    const std::size_t cs = channel_stride(w);
    std::vector<double> norm(w.shape[0], 0.0);
    for (int c = 0; c < w.shape[0]; ++c) {
      const float* p = w.data.data() + c * cs;
      for (std::size_t j = 0; j < cs; ++j) norm[c] += std::abs(static_cast<double>(p[j]));
    }
    std::vector<int> order = detail::sort_channels(
        w.shape[0], [&](int c) { return norm[c]; }, /*descending=*/false);
    r.groups[layer] = detail::partition_groups(order, group_count);
    r.order[layer] = std::move(order);
  }
  return r;
}

inline void validate_ranking(const ModelGraph& m, const ChannelRanking& r) {
  for (int layer : prunable_layers(m)) {
    auto it = r.order.find(layer);
    if (it == r.order.end())
      throw ConfigError("ranking missing prunable layer " + std::to_string(layer));
    std::vector<int> sorted = it->second;
    std::sort(sorted.begin(), sorted.end());
    if (sorted.size() != static_cast<std::size_t>(m.layers[layer].out_channels))
      throw ConfigError("ranking at layer " + std::to_string(layer) + " has " +
                        std::to_string(sorted.size()) + " entries for " +
                        std::to_string(m.layers[layer].out_channels) + " channels");
    for (int c = 0; c < m.layers[layer].out_channels; ++c)
      if (sorted[c] != c)
        throw ConfigError("ranking at layer " + std::to_string(layer) +
                          " is not a permutation of its channels");
  }
}

}  // namespace prosub
