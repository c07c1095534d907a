#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "prosub/arch.hpp"
#include "prosub/checkpoint.hpp"
#include "prosub/data.hpp"
#include "prosub/errors.hpp"
#include "prosub/fuse.hpp"
#include "prosub/noise.hpp"
#include "prosub/pool.hpp"
#include "prosub/ranking.hpp"
#include "prosub/report.hpp"
#include "prosub/runtime.hpp"
#include "prosub/search.hpp"
#include "prosub/train.hpp"

namespace prosub {

struct BenchConfig {
  int batch_size = 8;
  int warmup = 2;
  int runs = 5;
};

struct DatasetDescriptor {
  bool synthetic = true;
  std::string cifar_dir;  // when not synthetic
  SyntheticSpec synth;
};

inline const std::vector<std::string> kMethods = {"noise", "l1", "oracle", "uniform"};

struct PipelineConfig {
  std::string arch = "builtin:convnet6";  // builtin:<name> or a file path
  DatasetDescriptor dataset;
  std::string method = "noise";
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int pretrain_epochs = 4;
  TrainHyper pretrain_hyper;
  NoiseTrainConfig noise;
  SearchConfig search;
  FusedConfig fused;
  std::vector<double> uniform_multipliers = {0.25, 0.5, 0.75, 1.0};
  BenchConfig bench;

  void validate() const {
    if (std::find(kMethods.begin(), kMethods.end(), method) == kMethods.end())
      throw ConfigError("unknown ranking method '" + method +
                        "' (expected noise, l1, oracle, or uniform)");
    if (pretrain_epochs < 0) throw ConfigError("pretrain epochs must be nonnegative");
    search.validate();
  }
};

// Config files are JSON; every omitted key takes the documented default, and
// all stage seeds derive from the global seed unless the dataset block pins
// its own.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig cfg;
  cfg.arch = j.value("arch", cfg.arch);
  cfg.method = j.value("method", cfg.method);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    std::string type = d.value("type", "synthetic");
    if (type == "cifar10") {
      cfg.dataset.synthetic = false;
      cfg.dataset.cifar_dir = d.at("dir").get<std::string>();
    } else if (type == "synthetic") {
      cfg.dataset.synthetic = true;
      cfg.dataset.synth.classes = d.value("classes", cfg.dataset.synth.classes);
      cfg.dataset.synth.samples = d.value("samples", cfg.dataset.synth.samples);
      cfg.dataset.synth.dim = d.value("dim", cfg.dataset.synth.dim);
      cfg.dataset.synth.channels = d.value("channels", cfg.dataset.synth.channels);
      cfg.dataset.synth.separation = d.value("separation", cfg.dataset.synth.separation);
      cfg.dataset.synth.seed = d.value("seed", cfg.seed);
    } else {
      throw ConfigError("unknown dataset type '" + type + "'");
    }
  } else {
    cfg.dataset.synth.seed = cfg.seed;
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    cfg.pretrain_epochs = p.value("epochs", cfg.pretrain_epochs);
    cfg.pretrain_hyper.lr = p.value("lr", cfg.pretrain_hyper.lr);
    cfg.pretrain_hyper.momentum = p.value("momentum", cfg.pretrain_hyper.momentum);
    cfg.pretrain_hyper.batch_size = p.value("batch_size", cfg.pretrain_hyper.batch_size);
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    cfg.noise.epochs = n.value("epochs", cfg.noise.epochs);
    cfg.noise.beta_init = n.value("beta_init", cfg.noise.beta_init);
    cfg.noise.beta_lr = n.value("beta_lr", cfg.noise.beta_lr);
    cfg.noise.train_weights = n.value("train_weights", cfg.noise.train_weights);
    cfg.noise.hyper.lr = n.value("lr", cfg.noise.hyper.lr);
    cfg.noise.hyper.momentum = n.value("momentum", cfg.noise.hyper.momentum);
    cfg.noise.hyper.batch_size = n.value("batch_size", cfg.noise.hyper.batch_size);
  }
  if (j.contains("search")) {
    const auto& s = j.at("search");
    cfg.search.group_count = s.value("group_count", cfg.search.group_count);
    cfg.search.threshold = s.value("threshold", cfg.search.threshold);
    cfg.search.min_ratio = s.value("min_ratio", cfg.search.min_ratio);
    cfg.search.fine_tune_steps = s.value("fine_tune_steps", cfg.search.fine_tune_steps);
    cfg.search.fine_tune_lr = s.value("fine_tune_lr", cfg.search.fine_tune_lr);
    cfg.search.val_subset_size = s.value("val_subset_size", cfg.search.val_subset_size);
    cfg.search.bn_recal_batches = s.value("bn_recal_batches", cfg.search.bn_recal_batches);
    cfg.search.batch_size = s.value("batch_size", cfg.search.batch_size);
  }
  if (j.contains("fuse")) {
    const auto& f = j.at("fuse");
    cfg.fused.epochs = f.value("epochs", cfg.fused.epochs);
    cfg.fused.subnets_per_batch = f.value("subnets_per_batch", cfg.fused.subnets_per_batch);
    cfg.fused.bn_recal_batches = f.value("bn_recal_batches", cfg.fused.bn_recal_batches);
    cfg.fused.hyper.lr = f.value("lr", cfg.fused.hyper.lr);
    cfg.fused.hyper.momentum = f.value("momentum", cfg.fused.hyper.momentum);
    cfg.fused.hyper.batch_size = f.value("batch_size", cfg.fused.hyper.batch_size);
  }
  if (j.contains("uniform_multipliers"))
    cfg.uniform_multipliers = j.at("uniform_multipliers").get<std::vector<double>>();
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    cfg.bench.batch_size = b.value("batch_size", cfg.bench.batch_size);
    cfg.bench.warmup = b.value("warmup", cfg.bench.warmup);
    cfg.bench.runs = b.value("runs", cfg.bench.runs);
  }
  cfg.noise.seed = cfg.seed;
  cfg.search.seed = cfg.seed;
  cfg.fused.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

// --- Artifact paths -----------------------------------------------------------

namespace paths {

inline std::string pretrained(const PipelineConfig& c) { return c.out_dir + "/pretrained.ckpt"; }
inline std::string noise(const PipelineConfig& c) { return c.out_dir + "/noise.ckpt"; }
inline std::string method_dir(const PipelineConfig& c) { return c.out_dir + "/" + c.method; }
inline std::string pool_search(const PipelineConfig& c) {
  return method_dir(c) + "/pool_search.json";
}
inline std::string searched(const PipelineConfig& c) { return method_dir(c) + "/searched.ckpt"; }
inline std::string trace_csv(const PipelineConfig& c) { return method_dir(c) + "/trace.csv"; }
inline std::string trace_log(const PipelineConfig& c) { return method_dir(c) + "/trace.log"; }
inline std::string pool_reselect(const PipelineConfig& c) {
  return method_dir(c) + "/pool_reselect.json";
}
inline std::string dynamic_ckpt(const PipelineConfig& c) { return method_dir(c) + "/dynamic.ckpt"; }
inline std::string dynamic_pool(const PipelineConfig& c) {
  return method_dir(c) + "/dynamic_pool.json";
}
inline std::string eval_json(const PipelineConfig& c) { return method_dir(c) + "/eval.json"; }
inline std::string bench_json(const PipelineConfig& c) { return method_dir(c) + "/bench.json"; }
inline std::string report_csv(const PipelineConfig& c) { return c.out_dir + "/report.csv"; }

}  // namespace paths

inline void require_artifact(const std::string& path, const std::string& stage,
                             const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw DependencyError("stage '" + stage + "' requires " + path + "; run the '" + producer +
                          "' stage first");
}

// --- Shared stage plumbing ----------------------------------------------------

struct LoadedData {
  Dataset train;
  Dataset test;
  Dataset val;                   // fixed validation subset for the search
  std::vector<int> val_indices;  // into the test set
};

inline LoadedData load_dataset(const PipelineConfig& cfg) {
  LoadedData d;
  if (cfg.dataset.synthetic) {
    auto [train, test] = make_synthetic(cfg.dataset.synth);
    d.train = std::move(train);
    d.test = std::move(test);
  } else {
    auto [train, test] = load_cifar10(cfg.dataset.cifar_dir);
    d.train = std::move(train);
    d.test = std::move(test);
  }
  int n = std::min(cfg.search.val_subset_size, d.test.count());
  d.val_indices = draw_subset_indices(d.test.count(), n, cfg.seed);
  d.val = subset(d.test, d.val_indices);
  return d;
}

inline ArchFile resolve_arch(const PipelineConfig& cfg, int in_channels, int input_hw) {
  if (cfg.arch == "builtin:convnet6") {
    int classes = cfg.dataset.synthetic ? cfg.dataset.synth.classes : kCifarClasses;
    return convnet6(classes, input_hw, in_channels);
  }
  if (cfg.arch == "builtin:resnet8") {
    int classes = cfg.dataset.synthetic ? cfg.dataset.synth.classes : kCifarClasses;
    return resnet8(classes, input_hw, in_channels);
  }
  return load_arch(cfg.arch);
}

inline ModelGraph model_for(const PipelineConfig& cfg, const LoadedData& data) {
  ArchFile arch = resolve_arch(cfg, data.train.channels(), data.train.height());
  ModelGraph m = build_from_arch(arch, cfg.seed);
  if (m.layers.front().in_channels != data.train.channels())
    throw ConfigError("architecture expects " + std::to_string(m.layers.front().in_channels) +
                      " input channels, dataset has " + std::to_string(data.train.channels()));
  return m;
}

inline void load_params_into(ModelGraph& m, const std::map<std::string, Tensor>& table,
                             const std::string& path) {
  for (auto& [name, t] : m.params) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError(path + ": missing tensor '" + name + "'");
    if (it->second.numel() != t.numel())
      throw FormatError(path + ": tensor '" + name + "' has " +
                        std::to_string(it->second.numel()) + " elements, expected " +
                        std::to_string(t.numel()));
    t.data = it->second.data;
    t.shape = it->second.shape;
  }
}

inline constexpr const char* kBetaPrefix = "noise.beta.";

inline NoiseParams noise_from_table(const ModelGraph& m,
                                    const std::map<std::string, Tensor>& table,
                                    const std::string& path) {
  NoiseParams np;
  const std::size_t prefix_len = std::string(kBetaPrefix).size();
  for (const auto& [name, t] : table)
    if (name.rfind(kBetaPrefix, 0) == 0) np.beta[std::stoi(name.substr(prefix_len))] = t;
  if (np.beta.empty()) throw FormatError(path + ": no noise magnitudes stored");
  validate_noise(m, np);
  return np;
}

// --- Stages ---------------------------------------------------------------------

inline void run_pretrain(const PipelineConfig& cfg) {
  LoadedData data = load_dataset(cfg);
  ModelGraph m = model_for(cfg, data);
  train_epochs(m, data.train, cfg.pretrain_hyper, cfg.pretrain_epochs, cfg.seed);
  std::filesystem::create_directories(cfg.out_dir);
  save_checkpoint(paths::pretrained(cfg), m.params);
}

inline void run_noise_train(const PipelineConfig& cfg) {
  require_artifact(paths::pretrained(cfg), "noise-train", "pretrain");
  LoadedData data = load_dataset(cfg);
  ModelGraph m = model_for(cfg, data);
  load_params_into(m, load_checkpoint(paths::pretrained(cfg)), paths::pretrained(cfg));
  NoiseParams np = make_noise(m, cfg.noise.beta_init);
  noise_train(m, np, data.train, cfg.noise);
  std::map<std::string, Tensor> table = m.params;
  for (const auto& [layer, beta] : np.beta) table[kBetaPrefix + std::to_string(layer)] = beta;
  save_checkpoint(paths::noise(cfg), table);
}

inline void write_trace(const PipelineConfig& cfg, const SearchTrace& trace) {
  std::ofstream csv(paths::trace_csv(cfg), std::ios::trunc);
  if (!csv) throw DataError("cannot write " + paths::trace_csv(cfg));
  csv << "iteration,chosen_layer,evaluations,params,flops,accuracy,fine_tuned\n";
  for (const IterationRecord& r : trace.iterations)
    csv << r.iteration << "," << r.chosen_layer << "," << r.evaluations << "," << r.params << ","
        << r.flops << "," << detail::fixed4(r.accuracy_after) << "," << (r.fine_tuned ? 1 : 0)
        << "\n";
  std::ofstream log(paths::trace_log(cfg), std::ios::trunc);
  log << "iterations " << trace.total_iterations << "\n";
  log << "evaluations " << trace.total_evaluations << "\n";
  log << "fine_tune_steps " << trace.total_fine_tune_steps << "\n";
  log << "floor_reached " << (trace.floor_reached ? 1 : 0) << "\n";
  log << "val_indices";
  for (int i : trace.val_indices) log << " " << i;
  log << "\n";
}

inline void run_search_stage(const PipelineConfig& cfg) {
  LoadedData data = load_dataset(cfg);
  ModelGraph m = model_for(cfg, data);
  SearchData sd{&data.train, &data.val};
  std::filesystem::create_directories(paths::method_dir(cfg));

  if (cfg.method == "uniform") {
    require_artifact(paths::pretrained(cfg), "search", "pretrain");
    load_params_into(m, load_checkpoint(paths::pretrained(cfg)), paths::pretrained(cfg));
    std::vector<double> mults = cfg.uniform_multipliers;
    std::sort(mults.begin(), mults.end(), std::greater<>());
    mults.erase(std::unique(mults.begin(), mults.end()), mults.end());
    SubnetPool pool;
    for (double mult : mults) {
      SubnetConfig c = uniform_config(m, mult);
      double acc = evaluate_candidate(m, c, sd, cfg.search);
      pool.entries.push_back({c, acc, cost_of(m, c)});
    }
    save_pool(paths::pool_search(cfg), pool);
    save_checkpoint(paths::searched(cfg), m.params);
    SearchTrace trace;
    trace.val_indices = data.val_indices;
    write_trace(cfg, trace);
    return;
  }

  SearchResult result;
  if (cfg.method == "noise") {
    require_artifact(paths::noise(cfg), "search", "noise-train");
    auto table = load_checkpoint(paths::noise(cfg));
    load_params_into(m, table, paths::noise(cfg));
    NoiseParams np = noise_from_table(m, table, paths::noise(cfg));
    result = run_search(m, extract_ranking(np, cfg.search.group_count), cfg.search, sd);
  } else if (cfg.method == "l1") {
    require_artifact(paths::pretrained(cfg), "search", "pretrain");
    load_params_into(m, load_checkpoint(paths::pretrained(cfg)), paths::pretrained(cfg));
    result = run_search(m, l1_ranking(m, cfg.search.group_count), cfg.search, sd);
  } else {  // oracle
    require_artifact(paths::pretrained(cfg), "search", "pretrain");
    load_params_into(m, load_checkpoint(paths::pretrained(cfg)), paths::pretrained(cfg));
    result = brute_force_oracle(m, sd, cfg.search);
  }
  result.trace.val_indices = data.val_indices;
  save_pool(paths::pool_search(cfg), result.pool);
  save_checkpoint(paths::searched(cfg), m.params);
  write_trace(cfg, result.trace);
}

inline void run_reselect(const PipelineConfig& cfg) {
  require_artifact(paths::pool_search(cfg), "reselect", "search");
  require_artifact(paths::searched(cfg), "reselect", "search");
  LoadedData data = load_dataset(cfg);
  ModelGraph m = model_for(cfg, data);
  load_params_into(m, load_checkpoint(paths::searched(cfg)), paths::searched(cfg));
  SubnetPool pool = load_pool(paths::pool_search(cfg));
  SearchData sd{&data.train, &data.val};
  for (PoolEntry& e : pool.entries) {
    e.accuracy = evaluate_candidate(m, e.config, sd, cfg.search);
    e.cost = cost_of(m, e.config);
  }
  // the uniform baseline keeps its whole multiplier menu
  if (cfg.method != "uniform") pool = reselect(pool);
  save_pool(paths::pool_reselect(cfg), pool);
}

inline void run_fuse(const PipelineConfig& cfg) {
  require_artifact(paths::pool_reselect(cfg), "fuse", "reselect");
  require_artifact(paths::searched(cfg), "fuse", "search");
  LoadedData data = load_dataset(cfg);
  ModelGraph m = model_for(cfg, data);
  load_params_into(m, load_checkpoint(paths::searched(cfg)), paths::searched(cfg));
  SubnetPool pool = load_pool(paths::pool_reselect(cfg));
  std::vector<SubnetBnStats> stats = fused_train(m, pool, cfg.fused, data.train);
  DynamicModel dm;
  dm.base = std::move(m);
  dm.pool = std::move(pool);
  dm.bn_stats = std::move(stats);
  save_dynamic(paths::dynamic_ckpt(cfg), paths::dynamic_pool(cfg), dm);
}

inline DynamicModel load_dynamic_for(const PipelineConfig& cfg, const LoadedData& data) {
  ModelGraph proto = model_for(cfg, data);
  return load_dynamic(paths::dynamic_ckpt(cfg), paths::dynamic_pool(cfg), proto);
}

inline void run_eval(const PipelineConfig& cfg) {
  require_artifact(paths::dynamic_ckpt(cfg), "eval", "fuse");
  require_artifact(paths::dynamic_pool(cfg), "eval", "fuse");
  LoadedData data = load_dataset(cfg);
  DynamicModel dm = load_dynamic_for(cfg, data);
  nlohmann::json accs = nlohmann::json::array();
  for (int i = 0; i < static_cast<int>(dm.pool.entries.size()); ++i)
    accs.push_back(evaluate_accuracy(dm.plan(i), data.test));
  nlohmann::json j;
  j["accuracies"] = accs;
  std::ofstream out(paths::eval_json(cfg), std::ios::trunc);
  if (!out) throw DataError("cannot write " + paths::eval_json(cfg));
  out << j.dump(2) << "\n";
}

inline void run_bench(const PipelineConfig& cfg) {
  require_artifact(paths::dynamic_ckpt(cfg), "bench", "fuse");
  require_artifact(paths::dynamic_pool(cfg), "bench", "fuse");
  LoadedData data = load_dataset(cfg);
  DynamicModel dm = load_dynamic_for(cfg, data);
  if (std::filesystem::exists(paths::eval_json(cfg))) {
    std::ifstream in(paths::eval_json(cfg));
    nlohmann::json j;
    in >> j;
    auto accs = j.at("accuracies").get<std::vector<double>>();
    for (std::size_t i = 0; i < accs.size() && i < dm.pool.entries.size(); ++i)
      dm.pool.entries[i].accuracy = accs[i];
  }
  LatencyReport rep = benchmark(dm, cfg.bench.batch_size, cfg.bench.warmup, cfg.bench.runs,
                                cfg.seed);
  nlohmann::json rows = nlohmann::json::array();
  for (const LatencyRow& r : rep.rows) {
    nlohmann::json rec;
    rec["subnet_id"] = r.subnet_id;
    rec["params"] = r.params;
    rec["flops"] = r.flops;
    rec["top1_acc"] = r.top1_acc;
    rec["latency_ms"] = r.latency_ms;
    rows.push_back(rec);
  }
  nlohmann::json j;
  j["rows"] = rows;
  std::ofstream out(paths::bench_json(cfg), std::ios::trunc);
  if (!out) throw DataError("cannot write " + paths::bench_json(cfg));
  out << j.dump(2) << "\n";
}

// Merges every method directory under out_dir that has been evaluated.
// Returns true when there was nothing to report.
inline bool run_report(const PipelineConfig& cfg) {
  std::vector<ReportRow> rows;
  for (const std::string& method : kMethods) {
    PipelineConfig probe = cfg;
    probe.method = method;
    if (!std::filesystem::exists(paths::dynamic_pool(probe)) ||
        !std::filesystem::exists(paths::eval_json(probe)))
      continue;
    SubnetPool pool = load_pool(paths::dynamic_pool(probe));
    std::ifstream ein(paths::eval_json(probe));
    nlohmann::json ej;
    ein >> ej;
    auto accs = ej.at("accuracies").get<std::vector<double>>();
    std::map<int, double> latency;
    if (std::filesystem::exists(paths::bench_json(probe))) {
      std::ifstream bin(paths::bench_json(probe));
      nlohmann::json bj;
      bin >> bj;
      for (const auto& rec : bj.at("rows"))
        latency[rec.at("subnet_id").get<int>()] = rec.at("latency_ms").get<double>();
    }
    for (std::size_t i = 0; i < pool.entries.size(); ++i) {
      ReportRow r;
      r.method = method;
      r.subnet_id = static_cast<int>(i);
      r.params = pool.entries[i].cost.params;
      r.flops = pool.entries[i].cost.flops;
      r.top1_acc = i < accs.size() ? accs[i] : pool.entries[i].accuracy;
      r.latency_ms = latency.count(static_cast<int>(i)) ? latency[static_cast<int>(i)] : 0.0;
      rows.push_back(r);
    }
  }
  std::filesystem::create_directories(cfg.out_dir);
  return emit_report(rows, paths::report_csv(cfg), cfg.out_dir);
}

inline void run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  run_pretrain(cfg);
  if (cfg.method == "noise") run_noise_train(cfg);
  run_search_stage(cfg);
  run_reselect(cfg);
  run_fuse(cfg);
  run_eval(cfg);
  run_bench(cfg);
  run_report(cfg);
}

}  // namespace prosub
