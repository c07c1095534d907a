#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prosub/errors.hpp"
#include "prosub/subnet.hpp"

namespace prosub {

struct PoolEntry {
  SubnetConfig config;
  double accuracy = 0.0;  // validation accuracy recorded when the entry was formed
  CostReport cost;
};

// Ordered largest -> smallest; nesting and strictly decreasing cost are
// established by the producers (search / uniform construction) and re-checked
// by tests.
struct SubnetPool {
  std::vector<PoolEntry> entries;

  std::vector<SubnetConfig> configs() const {
    std::vector<SubnetConfig> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.config);
    return out;
  }
};

inline nlohmann::json config_to_json(const SubnetConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [layer, set] : cfg.retained) {
    nlohmann::json rec;
    rec["layer"] = layer;
    rec["count"] = set.size();
    rec["retained"] = set;
    layers.push_back(rec);
  }
  return layers;
}

inline SubnetConfig config_from_json(const nlohmann::json& j) {
  SubnetConfig cfg;
  for (const auto& rec : j) {
    std::vector<int> set = rec.at("retained").get<std::vector<int>>();
    if (rec.contains("count") && rec.at("count").get<std::size_t>() != set.size())
      throw FormatError("pool record: retained count " +
                        std::to_string(rec.at("count").get<std::size_t>()) +
                        " disagrees with list length " + std::to_string(set.size()));
    cfg.retained[rec.at("layer").get<int>()] = std::move(set);
  }
  return cfg;
}

inline nlohmann::json pool_to_json(const SubnetPool& pool) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : pool.entries) {
    nlohmann::json rec;
    rec["layers"] = config_to_json(e.config);
    rec["accuracy"] = e.accuracy;
    rec["params"] = e.cost.params;
    rec["flops"] = e.cost.flops;
    rec["size_ratio"] = e.cost.size_ratio;
    entries.push_back(rec);
  }
  nlohmann::json j;
  j["entries"] = entries;
  return j;
}

inline SubnetPool pool_from_json(const nlohmann::json& j) {
  SubnetPool pool;
  for (const auto& rec : j.at("entries")) {
    PoolEntry e;
    e.config = config_from_json(rec.at("layers"));
    e.accuracy = rec.at("accuracy").get<double>();
    e.cost.params = rec.at("params").get<long long>();
    e.cost.flops = rec.at("flops").get<long long>();
    e.cost.size_ratio = rec.at("size_ratio").get<double>();
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

inline void save_pool(const std::string& path, const SubnetPool& pool) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << pool_to_json(pool).dump(2) << "\n";
}

inline SubnetPool load_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return pool_from_json(j);
}

}  // namespace prosub
