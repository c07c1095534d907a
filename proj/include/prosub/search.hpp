#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/fuse.hpp"
#include "prosub/pool.hpp"
#include "prosub/ranking.hpp"
#include "prosub/subnet.hpp"
#include "prosub/train.hpp"

namespace prosub {

struct SearchConfig {
  int group_count = 4;           // G
  double threshold = 0.5;        // gamma: fine-tune when accuracy drops below
  double min_ratio = 0.25;       // M': parameter-count floor relative to full
  int fine_tune_steps = 200;
  float fine_tune_lr = 0.01f;
  int val_subset_size = 5000;
  int bn_recal_batches = 8;
  int batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (group_count < 1) throw ConfigError("group count must be >= 1");
    if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold outside [0,1]");
    if (min_ratio <= 0.0 || min_ratio > 1.0) throw ConfigError("min_ratio outside (0,1]");
    if (fine_tune_steps < 0 || fine_tune_lr < 0.0f)
      throw ConfigError("fine-tune budget must be nonnegative");
    if (val_subset_size < 1) throw ConfigError("validation subset must be non-empty");
  }
};

struct IterationRecord {
  int iteration = 0;
  int evaluations = 0;     // candidates evaluated this iteration
  int chosen_layer = -1;   // representative layer of the committed removal
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  bool fine_tuned = false;
  long long params = 0;
  long long flops = 0;
};

struct SearchTrace {
  std::vector<IterationRecord> iterations;
  std::vector<int> val_indices;  // persisted for reproducibility
  int total_iterations = 0;
  int total_evaluations = 0;
  int total_fine_tune_steps = 0;
  bool floor_reached = false;  // stopped because every layer hit its group floor
};

// Training data plus the fixed validation subset accuracy is measured on.
struct SearchData {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
};

// Slices the model per config, recalibrates BN statistics over seeded
// training batches (skipped when bn_recal_batches is 0), and measures top-1
// accuracy on the validation subset. Pure with respect to `m`.
inline double evaluate_candidate(const ModelGraph& m, const SubnetConfig& cfg,
                                 const SearchData& data, const SearchConfig& sc) {
  ModelGraph sliced = apply_config(m, cfg);
  if (sc.bn_recal_batches > 0)
    bn_recalibrate(sliced, *data.train, sc.bn_recal_batches, sc.batch_size, sc.seed);
  return evaluate_accuracy(sliced, *data.val);
}

// Fine-tunes the sliced sub-net's shared weights when accuracy fell below the
// threshold; plain SGD at fine_tune_lr, fresh optimizer state per call.
// Updates land only inside the config (scatter-back of the sliced tensors).
// Returns the number of steps taken.
inline int fine_tune_conditional(ModelGraph& m, const SubnetConfig& cfg, double accuracy,
                                 const SearchConfig& sc, const SearchData& data,
                                 std::uint64_t stream_salt = 0) {
  if (accuracy >= sc.threshold || sc.fine_tune_steps == 0) return 0;
  ModelGraph sliced = apply_config(m, cfg);
  Sgd opt(sc.fine_tune_lr, 0.0f);
  BatchStream stream(*data.train, sc.batch_size,
                     mix_seed(sc.seed, seed_salt::kSearch) + 17 * (stream_salt + 1));
  Tensor images;
  std::vector<int> labels;
  int steps = 0;
  while (steps < sc.fine_tune_steps) {
    if (!stream.next(images, labels)) {
      stream.reset();
      continue;
    }
    train_step(sliced, opt, images, labels);
    ++steps;
  }
  scatter_params(m, sliced, cfg);
  return steps;
}

namespace detail {

// Tie sets collapse to one searchable unit apiece; untied prunable layers
// stand alone. Returns representative -> members (members include the rep).
inline std::map<int, std::vector<int>> search_units(const ModelGraph& m) {
  TieSets ties = compute_tie_sets(m);
  std::map<int, int> member_to_rep;
  std::map<int, std::vector<int>> units;
  for (const auto& [id, members] : ties) {
    (void)id;
    // a tie set is searchable only if every member is prunable
    bool all_prunable = true;
    for (int mem : members) all_prunable &= m.layers[mem].prunable;
    if (!all_prunable) {
      for (int mem : members) member_to_rep[mem] = -1;  // frozen
      continue;
    }
    int rep = members.front();
    for (int mem : members) member_to_rep[mem] = rep;
    units[rep] = members;
  }
  for (int l : prunable_layers(m)) {
    if (member_to_rep.count(l)) continue;
    units[l] = {l};
  }
  return units;
}

}  // namespace detail

struct SearchResult {
  SubnetPool pool;
  SearchTrace trace;
};

// Algorithm: while the current sub-net is above the size floor, build one
// candidate per searchable unit by removing its next ranked channel group,
// evaluate each on the validation subset, commit the best, and fine-tune the
// shared weights in place when the committed accuracy falls below gamma.
// Candidates follow each unit's prune order, so every pool entry is a prefix
// cut of the same ranking and nesting holds by construction.
inline SearchResult run_search(ModelGraph& m, const ChannelRanking& ranking,
                               const SearchConfig& sc, const SearchData& data) {
  sc.validate();
  validate_ranking(m, ranking);
  SearchResult res;

  auto units = detail::search_units(m);
  // groups consumed so far, per representative
  std::map<int, int> removed;
  for (const auto& [rep, members] : units) {
    (void)members;
    removed[rep] = 0;
  }

  auto config_for = [&](const std::map<int, int>& removed_counts) {
    SubnetConfig cfg = full_config(m);
    for (const auto& [rep, members] : units) {
      const auto& groups = ranking.groups.at(rep);
      std::vector<int> retained;
      for (std::size_t g = removed_counts.at(rep); g < groups.size(); ++g)
        retained.insert(retained.end(), groups[g].begin(), groups[g].end());
      std::sort(retained.begin(), retained.end());
      for (int mem : members) cfg.retained[mem] = retained;
    }
    return cfg;
  };

  const int input_hw = m.input_hw;
  SubnetConfig current = config_for(removed);
  CostReport full_cost = cost_of(m, current, input_hw);
  double acc = evaluate_candidate(m, current, data, sc);
  res.pool.entries.push_back({current, acc, full_cost});

  int iteration = 0;
  while (cost_of(m, current, input_hw).size_ratio > sc.min_ratio) {
    struct Candidate {
      int rep;
      SubnetConfig cfg;
      double acc;
      CostReport cost;
    };
    std::vector<Candidate> cands;
    int evals = 0;
    for (const auto& [rep, members] : units) {
      (void)members;
      const auto& groups = ranking.groups.at(rep);
      if (static_cast<int>(groups.size()) - removed[rep] <= 1)
        continue;  // at the one-group floor
      std::map<int, int> trial = removed;
      trial[rep] += 1;
      Candidate c;
      c.rep = rep;
      c.cfg = config_for(trial);
      c.acc = evaluate_candidate(m, c.cfg, data, sc);
      c.cost = cost_of(m, c.cfg, input_hw);
      ++evals;
      cands.push_back(std::move(c));
    }
    if (cands.empty()) {
      res.trace.floor_reached = true;
      break;
    }
    // argmax accuracy; ties prefer the larger FLOPs reduction, then the lower
    // layer index — a total order, so the commit is deterministic
    const Candidate* best = &cands.front();
    for (const auto& c : cands) {
      if (c.acc > best->acc ||
          (c.acc == best->acc &&
           (c.cost.flops < best->cost.flops ||
            (c.cost.flops == best->cost.flops && c.rep < best->rep))))
        best = &c;
    }
    double acc_before = acc;
    removed[best->rep] += 1;
    current = best->cfg;
    acc = best->acc;
    res.pool.entries.push_back({current, acc, best->cost});

    IterationRecord rec;
    rec.iteration = ++iteration;
    rec.evaluations = evals;
    rec.chosen_layer = best->rep;
    rec.accuracy_before = acc_before;
    rec.accuracy_after = acc;
    rec.params = best->cost.params;
    rec.flops = best->cost.flops;
    res.trace.total_evaluations += evals;
    res.trace.total_iterations = iteration;
    int ft = fine_tune_conditional(m, current, acc, sc, data,
                                   static_cast<std::uint64_t>(iteration));
    res.trace.total_fine_tune_steps += ft;
    rec.fine_tuned = ft > 0;
    res.trace.iterations.push_back(rec);
  }
  return res;
}

// --- Brute-force oracle -------------------------------------------------------
// Realizes the exhaustive per-channel variant: each iteration tries zeroing
// out every individual remaining channel (weights, bias, and the downstream
// BN affine), commits the argmax, and repeats until nothing is left. Masked
// copies rather than slicing let the shrink run all the way to empty layers;
// a zeroed channel contributes exact zeros downstream, so for configs that
// are also sliceable the two evaluation routes agree bit-for-bit.

inline constexpr int kOracleChannelGuard = 64;

namespace detail {

// Zeroes channel c of prunable layer l in place: weight row, bias, and the
// following BN layer's affine for that channel.
inline void mask_channel(ModelGraph& m, int layer, int channel) {
  Tensor& w = m.param(layer, "weight");
  const std::size_t cs = channel_stride(w);
  std::fill_n(w.data.begin() + channel * cs, cs, 0.0f);
  m.param(layer, "bias").data[channel] = 0.0f;
  for (std::size_t j = layer + 1; j < m.layers.size(); ++j) {
    if (m.layers[j].kind == LayerKind::BatchNorm2d &&
        channel_source(m, static_cast<int>(j) - 1) == layer) {
      m.param(static_cast<int>(j), "gamma").data[channel] = 0.0f;
      m.param(static_cast<int>(j), "beta").data[channel] = 0.0f;
    }
    if (m.layers[j].kind == LayerKind::Conv2d || m.layers[j].kind == LayerKind::Linear) break;
  }
}

}  // namespace detail

// Runs the full shrink regardless of min_ratio (the oracle's purpose is the
// complete trajectory and its evaluation count); pool entries stop once a
// layer empties, the trace keeps counting.
inline SearchResult brute_force_oracle(const ModelGraph& m, const SearchData& data,
                                       const SearchConfig& sc) {
  sc.validate();
  int total_channels = 0;
  for (int l : prunable_layers(m)) total_channels += m.layers[l].out_channels;
  if (total_channels > kOracleChannelGuard)
    throw ConfigError("brute-force oracle refused: " + std::to_string(total_channels) +
                      " total channels exceeds the guard of " +
                      std::to_string(kOracleChannelGuard));

  SearchResult res;
  auto units = detail::search_units(m);
  std::map<int, std::set<int>> removed;  // representative -> zeroed channels
  for (const auto& [rep, members] : units) {
    (void)members;
    removed[rep] = {};
  }

  auto masked_model = [&](const std::map<int, std::set<int>>& dead) {
    ModelGraph masked = m;
    for (const auto& [rep, channels] : dead)
      for (int ch : channels)
        for (int mem : units.at(rep)) detail::mask_channel(masked, mem, ch);
    return masked;
  };
  auto evaluate_masked = [&](const std::map<int, std::set<int>>& dead) {
    ModelGraph masked = masked_model(dead);
    if (sc.bn_recal_batches > 0)
      bn_recalibrate(masked, *data.train, sc.bn_recal_batches, sc.batch_size, sc.seed);
    return evaluate_accuracy(masked, *data.val);
  };
  auto config_for = [&](const std::map<int, std::set<int>>& dead) {
    // valid only while every unit keeps at least one channel
    SubnetConfig cfg = full_config(m);
    for (const auto& [rep, channels] : dead) {
      std::vector<int> retained;
      for (int c = 0; c < m.layers[rep].out_channels; ++c)
        if (!channels.count(c)) retained.push_back(c);
      for (int mem : units.at(rep)) cfg.retained[mem] = retained;
    }
    return cfg;
  };

  const int input_hw = m.input_hw;
  res.pool.entries.push_back(
      {config_for(removed), evaluate_masked(removed), cost_of(m, config_for(removed), input_hw)});

  int remaining = 0;
  for (const auto& [rep, members] : units) {
    (void)members;
    remaining += m.layers[rep].out_channels;
  }
  int iteration = 0;
  while (remaining > 0) {
    struct Candidate {
      int rep;
      int channel;
      double acc;
      long long flops_drop;
    };
    std::vector<Candidate> cands;
    int evals = 0;
    for (const auto& [rep, dead] : removed) {
      for (int c = 0; c < m.layers[rep].out_channels; ++c) {
        if (dead.count(c)) continue;
        auto trial = removed;
        trial[rep].insert(c);
        Candidate cand;
        cand.rep = rep;
        cand.channel = c;
        cand.acc = evaluate_masked(trial);
        // per-channel removals in wider layers drop more FLOPs; use the unit
        // size as the tie-break proxy
        cand.flops_drop = static_cast<long long>(units.at(rep).size());
        ++evals;
        cands.push_back(cand);
      }
    }
    const Candidate* best = &cands.front();
    for (const auto& c : cands)
      if (c.acc > best->acc ||
          (c.acc == best->acc && (c.flops_drop > best->flops_drop ||
                                  (c.flops_drop == best->flops_drop &&
                                   (c.rep < best->rep ||
                                    (c.rep == best->rep && c.channel < best->channel))))))
        best = &c;
    removed[best->rep].insert(best->channel);
    --remaining;

    IterationRecord rec;
    rec.iteration = ++iteration;
    rec.evaluations = evals;
    rec.chosen_layer = best->rep;
    rec.accuracy_after = best->acc;
    res.trace.total_evaluations += evals;
    res.trace.total_iterations = iteration;

    bool all_nonempty = true;
    for (const auto& [rep, dead] : removed)
      all_nonempty &= static_cast<int>(dead.size()) < m.layers[rep].out_channels;
    if (all_nonempty) {
      SubnetConfig cfg = config_for(removed);
      CostReport cost = cost_of(m, cfg, input_hw);
      rec.params = cost.params;
      rec.flops = cost.flops;
      res.pool.entries.push_back({std::move(cfg), best->acc, cost});
    }
    res.trace.iterations.push_back(rec);
  }
  return res;
}

}  // namespace prosub
