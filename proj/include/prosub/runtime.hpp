#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prosub/checkpoint.hpp"
#include "prosub/errors.hpp"
#include "prosub/fuse.hpp"
#include "prosub/pool.hpp"
#include "prosub/subnet.hpp"

namespace prosub {

// A fused model plus its sub-net menu: shared full weights, the pool, and one
// BN-statistics record per entry. Switching re-slices into a memoized
// execution plan; weights are never mutated.
struct DynamicModel {
  ModelGraph base;
  SubnetPool pool;
  std::vector<SubnetBnStats> bn_stats;  // pool-aligned; may be empty when BN-free
  int active = 0;

  mutable std::vector<std::optional<ModelGraph>> plans;

  const ModelGraph& plan(int index) const {
    if (index < 0 || index >= static_cast<int>(pool.entries.size()))
      throw ConfigError("sub-net index " + std::to_string(index) + " out of range [0," +
                        std::to_string(pool.entries.size()) + ")");
    if (plans.size() != pool.entries.size()) plans.assign(pool.entries.size(), std::nullopt);
    if (!plans[index]) {
      ModelGraph sliced = apply_config(base, pool.entries[index].config);
      if (index < static_cast<int>(bn_stats.size()))
        for (const auto& [name, t] : bn_stats[index]) sliced.params.at(name).data = t.data;
      plans[index] = std::move(sliced);
    }
    return *plans[index];
  }
};

inline Tensor switch_and_infer(DynamicModel& dm, int index, const Tensor& input) {
  const ModelGraph& sliced = dm.plan(index);
  dm.active = index;
  return forward_eval(sliced, input);
}

struct LatencyRow {
  int subnet_id = 0;
  long long params = 0;
  long long flops = 0;
  double top1_acc = 0.0;
  double latency_ms = 0.0;
};

struct LatencyReport {
  std::vector<LatencyRow> rows;  // ordered by descending flops
};

// Median wall-clock of `runs` timed forward passes per sub-net, after
// `warmup` discarded passes, on one seeded random batch. Only the forward
// pass sits inside the timed window.
inline LatencyReport benchmark(DynamicModel& dm, int batch_size, int warmup, int runs,
                               std::uint64_t seed = 1) {
  if (runs < 1) throw ConfigError("benchmark needs at least one timed run");
  if (batch_size < 1) throw ConfigError("benchmark batch size must be positive");
  const LayerSpec& first = dm.base.layers.front();
  Tensor input({batch_size, first.in_channels, dm.base.input_hw, dm.base.input_hw});
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(seed, seed_salt::kBench)));
  fill_normal(input, 0.0f, 1.0f, rng);

  LatencyReport report;
  for (int i = 0; i < static_cast<int>(dm.pool.entries.size()); ++i) {
    const ModelGraph& sliced = dm.plan(i);
    for (int w = 0; w < warmup; ++w) forward_eval(sliced, input);
    std::vector<double> times;
    times.reserve(runs);
    for (int r = 0; r < runs; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      forward_eval(sliced, input);
      auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    double median = times.size() % 2 == 1
                        ? times[times.size() / 2]
                        : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    LatencyRow row;
    row.subnet_id = i;
    row.params = dm.pool.entries[i].cost.params;
    row.flops = dm.pool.entries[i].cost.flops;
    row.top1_acc = dm.pool.entries[i].accuracy;
    row.latency_ms = median;
    report.rows.push_back(row);
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const LatencyRow& a, const LatencyRow& b) { return a.flops > b.flops; });
  return report;
}

// Dynamic checkpoint: the base tensor table plus each sub-net's BN statistics
// under "subnet<i>." prefixes; the pool itself travels in a JSON sidecar.
inline void save_dynamic(const std::string& ckpt_path, const std::string& pool_path,
                         const DynamicModel& dm) {
  std::map<std::string, Tensor> table = dm.base.params;
  for (std::size_t i = 0; i < dm.bn_stats.size(); ++i)
    for (const auto& [name, t] : dm.bn_stats[i])
      table["subnet" + std::to_string(i) + "." + name] = t;
  save_checkpoint(ckpt_path, table);
  save_pool(pool_path, dm.pool);
}

// Rebuilds a DynamicModel around a freshly built graph of the same
// architecture; `proto` supplies layers, num_classes, and input size.
inline DynamicModel load_dynamic(const std::string& ckpt_path, const std::string& pool_path,
                                 const ModelGraph& proto) {
  DynamicModel dm;
  dm.base = proto;
  dm.pool = load_pool(pool_path);
  auto table = load_checkpoint(ckpt_path);
  dm.bn_stats.assign(dm.pool.entries.size(), {});
  for (auto& [name, t] : table) {
    if (name.rfind("subnet", 0) == 0) {
      std::size_t dot = name.find('.');
      if (dot == std::string::npos)
        throw FormatError(ckpt_path + ": malformed sub-net tensor name '" + name + "'");
      std::string digits = name.substr(6, dot - 6);
      if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](unsigned char ch) {
            return std::isdigit(ch) != 0;
          }))
        throw FormatError(ckpt_path + ": malformed sub-net tensor name '" + name + "'");
      int idx = std::stoi(digits);
      if (idx < 0 || idx >= static_cast<int>(dm.bn_stats.size()))
        throw FormatError(ckpt_path + ": sub-net index " + std::to_string(idx) +
                          " outside the pool of " + std::to_string(dm.bn_stats.size()));
      dm.bn_stats[idx][name.substr(dot + 1)] = std::move(t);
    } else {
      auto it = dm.base.params.find(name);
      if (it == dm.base.params.end())
        throw FormatError(ckpt_path + ": tensor '" + name + "' not in the architecture");
      if (it->second.numel() != t.numel())
        throw FormatError(ckpt_path + ": tensor '" + name + "' has " +
                          std::to_string(t.numel()) + " elements, architecture expects " +
                          std::to_string(it->second.numel()));
      it->second.data = std::move(t.data);
    }
  }
  return dm;
}

}  // namespace prosub
