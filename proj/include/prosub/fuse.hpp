#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/pool.hpp"
#include "prosub/subnet.hpp"
#include "prosub/train.hpp"

namespace prosub {

struct FusedConfig {
  int epochs = 5;
  int subnets_per_batch = 2;  // random middles on top of largest + smallest
  TrainHyper hyper;
  int bn_recal_batches = 8;
  std::uint64_t seed = 1;
};

// Recomputes every BN layer's running statistics as the streaming aggregate
// (mean and population variance) over the given number of seeded training
// batches, forwarded in training mode without touching weights. The model is
// expected to already be sliced to the sub-net of interest.
inline void bn_recalibrate(ModelGraph& m, const Dataset& train, int batches, int batch_size,
                           std::uint64_t seed) {
  bool has_bn = false;
  for (const auto& l : m.layers) has_bn |= l.kind == LayerKind::BatchNorm2d;
  if (!has_bn) return;
  if (batches < 1) throw ConfigError("BN recalibration needs at least one batch");

  const std::size_t L = m.layers.size();
  // per BN layer, per channel: running (count, mean, M2)
  std::vector<std::vector<double>> count(L), mean(L), m2(L);
  BatchStream stream(train, batch_size, mix_seed(seed, seed_salt::kSearch));
  Tensor images;
  std::vector<int> labels;
  Workspace ws;
  ForwardOptions fo;
  fo.training = true;
  fo.update_running = false;
  for (int b = 0; b < batches; ++b) {
    if (!stream.next(images, labels)) {
      stream.reset();
      if (!stream.next(images, labels)) throw DataError("BN recalibration: empty dataset");
    }
    forward(m, images, fo, &ws);
    for (std::size_t i = 0; i < L; ++i) {
      if (m.layers[i].kind != LayerKind::BatchNorm2d) continue;
      const Tensor& bm = ws.bn_mean[i];
      const Tensor& bv = ws.bn_var[i];
      const int c = static_cast<int>(bm.numel());
      const Tensor& x = ws.act[i];
      const double nb = static_cast<double>(x.shape[0]) * x.shape[2] * x.shape[3];
      if (count[i].empty()) {
        count[i].assign(c, 0.0);
        mean[i].assign(c, 0.0);
        m2[i].assign(c, 0.0);
      }
      for (int ci = 0; ci < c; ++ci) {
        // parallel-variance merge of (count, mean, M2) aggregates
        const double na = count[i][ci];
        const double delta = bm.data[ci] - mean[i][ci];
        const double n = na + nb;
        mean[i][ci] += delta * nb / n;
        m2[i][ci] += static_cast<double>(bv.data[ci]) * nb + delta * delta * na * nb / n;
        count[i][ci] = n;
      }
    }
  }
  for (std::size_t i = 0; i < L; ++i) {
    if (m.layers[i].kind != LayerKind::BatchNorm2d) continue;
    Tensor& rm = m.param(static_cast<int>(i), "running_mean");
    Tensor& rv = m.param(static_cast<int>(i), "running_var");
    for (std::size_t ci = 0; ci < rm.numel(); ++ci) {
      rm.data[ci] = static_cast<float>(mean[i][ci]);
      rv.data[ci] = static_cast<float>(m2[i][ci] / count[i][ci]);
    }
  }
}

// Keeps an entry only if it beats every smaller survivor, so accuracy ends up
// strictly increasing with model size. Input and output are ordered largest
// -> smallest. Idempotent.
inline SubnetPool reselect(const SubnetPool& pool) {
  if (pool.entries.empty()) throw ConfigError("reselect on an empty pool");
  std::vector<PoolEntry> kept;  // accumulated smallest-first
  double best = -1.0;
  for (auto it = pool.entries.rbegin(); it != pool.entries.rend(); ++it) {
    if (it->accuracy > best) {
      kept.push_back(*it);
      best = it->accuracy;
    }
  }
  SubnetPool out;
  out.entries.assign(kept.rbegin(), kept.rend());
  return out;
}

// Per-batch sub-net selection: always the largest and smallest entries, plus
// R distinct random middles. Small pools are returned whole.
inline std::vector<int> sandwich_sample(int pool_size, int r, std::mt19937& rng) {
  if (pool_size < 1) throw ConfigError("sandwich sampling over an empty pool");
  std::vector<int> all(pool_size);
  std::iota(all.begin(), all.end(), 0);
  if (pool_size <= r + 2) return all;
  std::vector<int> middles(all.begin() + 1, all.end() - 1);
  std::vector<int> picked;
  std::sample(middles.begin(), middles.end(), std::back_inserter(picked),
              static_cast<std::size_t>(r), rng);
  std::vector<int> out;
  out.push_back(0);
  out.insert(out.end(), picked.begin(), picked.end());
  out.push_back(pool_size - 1);
  std::sort(out.begin(), out.end());
  return out;
}

// Momentum SGD restricted to the elements a batch actually touched; velocity
// and weight stay bit-identical everywhere else.
struct MaskedSgd {
  float lr = 0.05f;
  float momentum = 0.9f;
  std::map<std::string, Tensor> velocity;

  MaskedSgd(float lr_, float momentum_) : lr(lr_), momentum(momentum_) {}

  void step(ModelGraph& m, const std::map<std::string, std::vector<char>>& touched) {
    for (auto& [name, t] : m.params) {
      if (t.grad.empty()) continue;
      if (name.find("running_") != std::string::npos) continue;
      auto it = touched.find(name);
      if (it == touched.end()) continue;
      const std::vector<char>& mask = it->second;
      Tensor& v = velocity[name];
      if (v.data.size() != t.data.size()) v = Tensor(t.shape);
      for (std::size_t j = 0; j < t.data.size(); ++j) {
        if (!mask[j]) continue;
        v.data[j] = momentum * v.data[j] + t.grad[j];
        t.data[j] -= lr * v.data[j];
      }
    }
  }
};

// Per-sub-net BN running statistics recorded after fused training, keyed like
// the model's own parameter table (sliced shapes).
using SubnetBnStats = std::map<std::string, Tensor>;

inline SubnetBnStats collect_bn_stats(const ModelGraph& sliced) {
  SubnetBnStats stats;
  for (const auto& [name, t] : sliced.params)
    if (name.find("running_") != std::string::npos) stats[name] = t;
  return stats;
}

// Joint training of all pool entries over shared weights: per batch, the
// sandwich-sampled sub-nets each forward/backward on the same inputs, their
// sliced gradients accumulate into the full parameter set, and one masked
// optimizer step applies. Afterwards each entry gets its own recalibrated BN
// statistics. Returns those statistics, pool-aligned; the model is trained in
// place.
inline std::vector<SubnetBnStats> fused_train(ModelGraph& m, const SubnetPool& pool,
                                              const FusedConfig& cfg, const Dataset& train) {
  if (pool.entries.empty()) throw ConfigError("fused training over an empty pool");
  std::vector<SliceMap> maps;
  maps.reserve(pool.entries.size());
  for (const auto& e : pool.entries)
    maps.push_back(build_slice_map(m, normalize_config(m, e.config)));

  MaskedSgd opt(cfg.hyper.lr, cfg.hyper.momentum);
  std::mt19937 sample_rng(static_cast<std::uint32_t>(mix_seed(cfg.seed, seed_salt::kFuse)));
  Tensor images;
  std::vector<int> labels;
  for (int e = 0; e < cfg.epochs; ++e) {
    BatchStream stream(train, cfg.hyper.batch_size, mix_seed(cfg.seed, seed_salt::kFuse) + 1 + e);
    while (stream.next(images, labels)) {
      m.zero_grads();
      std::map<std::string, std::vector<char>> touched;
      std::vector<int> picked =
          sandwich_sample(static_cast<int>(pool.entries.size()), cfg.subnets_per_batch,
                          sample_rng);
      for (int idx : picked) {
        ModelGraph sliced = apply_config(m, pool.entries[idx].config);
        Workspace ws;
        ForwardOptions fo;
        fo.training = true;
        fo.update_running = false;
        Tensor logits = forward(sliced, images, fo, &ws);
        Tensor dlogits;
        double loss = cross_entropy(logits, labels, &dlogits);
        if (!std::isfinite(loss))
          throw NumericError("fused training loss is not finite for sub-net " +
                             std::to_string(idx));
        backward(sliced, images, dlogits, ws);
        scatter_add_grads(m, sliced, maps[idx], touched);
      }
      opt.step(m, touched);
    }
  }

  std::vector<SubnetBnStats> stats;
  stats.reserve(pool.entries.size());
  for (const auto& entry : pool.entries) {
    ModelGraph sliced = apply_config(m, entry.config);
    bn_recalibrate(sliced, train, cfg.bn_recal_batches, cfg.hyper.batch_size, cfg.seed);
    stats.push_back(collect_bn_stats(sliced));
  }
  return stats;
}

}  // namespace prosub
