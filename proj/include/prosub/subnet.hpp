#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/graph.hpp"

namespace prosub {

// A sub-net is identified by the output channels each prunable layer keeps.
// Layers absent from the map implicitly keep everything.
struct SubnetConfig {
  std::map<int, std::vector<int>> retained;  // prunable layer -> ascending channel indices

  bool operator==(const SubnetConfig& o) const { return retained == o.retained; }
};

struct CostReport {
  long long flops = 0;   // multiply-accumulates x2, conv + linear
  long long params = 0;  // weights + biases + BN affine
  double size_ratio = 1.0;
};

// Layers whose outputs meet at an element-wise add must keep identical
// channel sets. Sets are discovered from residual-add producers and from
// explicit tie_group tags, merged transitively.
using TieSets = std::map<std::string, std::vector<int>>;  // id -> sorted layer indices

namespace detail {

struct UnionFind {
  std::map<int, int> parent;
  int find(int x) {
    if (!parent.count(x)) parent[x] = x;
    return parent[x] == x ? x : parent[x] = find(parent[x]);
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace detail

inline TieSets compute_tie_sets(const ModelGraph& m) {
  detail::UnionFind uf;
  std::map<int, std::string> explicit_name;
  std::map<std::string, int> tag_anchor;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (!l.tie_group.empty()) {
      if (l.kind != LayerKind::Conv2d && l.kind != LayerKind::Linear)
        throw ConfigError("layer " + std::to_string(i) + ": tie_group on a " +
                          kind_name(l.kind) + " layer (only conv2d/linear carry channels)");
      auto it = tag_anchor.find(l.tie_group);
      if (it == tag_anchor.end())
        tag_anchor[l.tie_group] = static_cast<int>(i);
      else
        uf.unite(static_cast<int>(i), it->second);
      explicit_name[static_cast<int>(i)] = l.tie_group;
      uf.find(static_cast<int>(i));
    }
    if (l.kind == LayerKind::ResidualAdd) {
      int a = channel_source(m, static_cast<int>(i) - 1);
      int b = channel_source(m, l.from);
      if (a < 0 || b < 0)
        throw ConfigError("layer " + std::to_string(i) +
                          ": residual-add reaches the network input; both branches need a "
                          "conv/linear producer");
      if (a != b) uf.unite(a, b);
    }
  }
  // group members by root, drop singletons
  std::map<int, std::vector<int>> by_root;
  for (const auto& [node, p] : uf.parent) {
    (void)p;
    by_root[uf.find(node)].push_back(node);
  }
  TieSets out;
  for (auto& [root, members] : by_root) {
    (void)root;
    if (members.size() < 2) continue;
    std::sort(members.begin(), members.end());
    std::string id;
    for (int mem : members)
      if (explicit_name.count(mem)) {
        id = explicit_name[mem];
        break;
      }
    if (id.empty()) id = "tie@" + std::to_string(members.front());
    out[id] = members;
  }
  return out;
}

inline std::vector<int> prunable_layers(const ModelGraph& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].prunable) out.push_back(static_cast<int>(i));
  return out;
}

inline std::vector<int> full_range(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

inline SubnetConfig full_config(const ModelGraph& m) {
  SubnetConfig cfg;
  for (int l : prunable_layers(m)) cfg.retained[l] = full_range(m.layers[l].out_channels);
  return cfg;
}

// Fills in implicit full-retention entries so every prunable layer is
// explicit; the result is what slicing and costing operate on.
inline SubnetConfig normalize_config(const ModelGraph& m, const SubnetConfig& cfg) {
  SubnetConfig out = cfg;
  for (int l : prunable_layers(m))
    if (!out.retained.count(l)) out.retained[l] = full_range(m.layers[l].out_channels);
  return out;
}

inline void validate_config(const ModelGraph& m, const SubnetConfig& cfg) {
  for (const auto& [layer, set] : cfg.retained) {
    if (layer < 0 || layer >= static_cast<int>(m.layers.size()) || !m.layers[layer].prunable)
      throw ConfigError("config names layer " + std::to_string(layer) +
                        " which is not a prunable layer");
    if (set.empty())
      throw ConfigError("config retains no channels at layer " + std::to_string(layer));
    int p = m.layers[layer].out_channels;
    for (std::size_t j = 0; j < set.size(); ++j) {
      if (set[j] < 0 || set[j] >= p)
        throw ConfigError("config channel " + std::to_string(set[j]) + " out of range [0," +
                          std::to_string(p) + ") at layer " + std::to_string(layer));
      if (j > 0 && set[j] <= set[j - 1])
        throw ConfigError("config channels not strictly ascending at layer " +
                          std::to_string(layer));
    }
  }
  SubnetConfig norm = normalize_config(m, cfg);
  for (const auto& [id, members] : compute_tie_sets(m)) {
    const std::vector<int>* ref = nullptr;
    int ref_layer = -1;
    for (int mem : members) {
      const std::vector<int>& cur = m.layers[mem].prunable
                                        ? norm.retained.at(mem)
                                        : norm.retained[mem] = full_range(m.layers[mem].out_channels);
      if (!ref) {
        ref = &norm.retained.at(mem);
        ref_layer = mem;
      } else if (cur != *ref) {
        throw ConfigError("tie set '" + id + "': layers " + std::to_string(ref_layer) + " and " +
                          std::to_string(mem) + " retain different channel sets");
      }
    }
  }
}

namespace detail {

// Retained output channels of layer i under a normalized config; nullopt for
// layers without a channel notion of their own.
inline std::optional<std::vector<int>> retained_out(const ModelGraph& m, const SubnetConfig& cfg,
                                                    int i) {
  const LayerSpec& l = m.layers[i];
  if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
    if (l.prunable && cfg.retained.count(i)) return cfg.retained.at(i);
    return full_range(l.out_channels);
  }
  return std::nullopt;
}

// Retained channels feeding layer i's input (full range when fed by the
// network input).
inline std::vector<int> retained_in(const ModelGraph& m, const SubnetConfig& cfg, int i) {
  int src = input_source(m, i);
  if (src < 0) return full_range(m.layers[i].in_channels);
  return *retained_out(m, cfg, src);
}

}  // namespace detail

// For every parameter of the sliced model, the flat indices of the matching
// elements in the full model. Drives slicing, scatter-back, and masked
// gradient accumulation from one mapping.
using SliceMap = std::map<std::string, std::vector<std::size_t>>;

inline SliceMap build_slice_map(const ModelGraph& m, const SubnetConfig& cfg) {
  SliceMap map;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    int li = static_cast<int>(i);
    if (l.kind == LayerKind::Conv2d) {
      std::vector<int> rout = *detail::retained_out(m, cfg, li);
      std::vector<int> rin = detail::retained_in(m, cfg, li);
      const int k2 = l.kernel * l.kernel;
      std::vector<std::size_t> widx;
      widx.reserve(rout.size() * rin.size() * k2);
      for (int o : rout)
        for (int c : rin)
          for (int kk = 0; kk < k2; ++kk)
            widx.push_back((static_cast<std::size_t>(o) * l.in_channels + c) * k2 + kk);
      map[ModelGraph::key(li, "weight")] = std::move(widx);
      std::vector<std::size_t> bidx(rout.begin(), rout.end());
      map[ModelGraph::key(li, "bias")] = std::move(bidx);
    } else if (l.kind == LayerKind::Linear) {
      std::vector<int> rout = *detail::retained_out(m, cfg, li);
      int src = input_source(m, li);
      std::vector<std::size_t> widx;
      if (src < 0) {
        for (int o : rout)
          for (int c = 0; c < l.in_channels; ++c)
            widx.push_back(static_cast<std::size_t>(o) * l.in_channels + c);
      } else {
        // input features arrive as per-channel blocks (flattened spatial)
        int p_src = m.layers[src].out_channels;
        if (l.in_channels % p_src != 0)
          throw ConfigError("layer " + std::to_string(li) + ": in_channels " +
                            std::to_string(l.in_channels) + " not divisible by producer channels " +
                            std::to_string(p_src));
        int block = l.in_channels / p_src;
        std::vector<int> rin = *detail::retained_out(m, cfg, src);
        for (int o : rout)
          for (int c : rin)
            for (int b = 0; b < block; ++b)
              widx.push_back(static_cast<std::size_t>(o) * l.in_channels + c * block + b);
      }
      map[ModelGraph::key(li, "weight")] = std::move(widx);
      std::vector<std::size_t> bidx(rout.begin(), rout.end());
      map[ModelGraph::key(li, "bias")] = std::move(bidx);
    } else if (l.kind == LayerKind::BatchNorm2d) {
      std::vector<int> r = detail::retained_in(m, cfg, li);
      std::vector<std::size_t> idx(r.begin(), r.end());
      for (const char* part : {"gamma", "beta", "running_mean", "running_var"})
        map[ModelGraph::key(li, part)] = idx;
    }
  }
  return map;
}

// Structural slicing: a fresh model whose every tensor is the retained
// sub-block of the original. Full configs reproduce the original bit-exactly.
inline ModelGraph apply_config(const ModelGraph& m, const SubnetConfig& cfg_in) {
  validate_config(m, cfg_in);
  SubnetConfig cfg = normalize_config(m, cfg_in);
  SliceMap map = build_slice_map(m, cfg);
  ModelGraph out;
  out.num_classes = m.num_classes;
  out.input_hw = m.input_hw;
  out.layers = m.layers;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    int li = static_cast<int>(i);
    auto rout = detail::retained_out(m, cfg, li);
    if (l.kind == LayerKind::Conv2d) {
      std::vector<int> rin = detail::retained_in(m, cfg, li);
      l.in_channels = static_cast<int>(rin.size());
      l.out_channels = static_cast<int>(rout->size());
    } else if (l.kind == LayerKind::Linear) {
      int src = input_source(m, li);
      int block = src < 0 ? 1 : l.in_channels / m.layers[src].out_channels;
      std::vector<int> rin = detail::retained_in(m, cfg, li);
      l.in_channels = src < 0 ? l.in_channels : static_cast<int>(rin.size()) * block;
      l.out_channels = static_cast<int>(rout->size());
    } else {
      // pass-through layers mirror their producer's channel count
      std::vector<int> r = detail::retained_in(m, cfg, li);
      l.in_channels = l.out_channels = static_cast<int>(r.size());
    }
  }
  for (const auto& [name, t] : m.params) {
    auto it = map.find(name);
    if (it == map.end()) {
      out.params[name] = t;
      continue;
    }
    const std::vector<std::size_t>& idx = it->second;
    Tensor sliced;
    // shape follows the updated layer spec
    sliced.data.resize(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) sliced.data[j] = t.data[idx[j]];
    out.params[name] = std::move(sliced);
  }
  // fix up sliced tensor shapes from the updated specs
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    const LayerSpec& l = out.layers[i];
    int li = static_cast<int>(i);
    if (l.kind == LayerKind::Conv2d) {
      out.param(li, "weight").shape = {l.out_channels, l.in_channels, l.kernel, l.kernel};
      out.param(li, "bias").shape = {l.out_channels};
    } else if (l.kind == LayerKind::Linear) {
      out.param(li, "weight").shape = {l.out_channels, l.in_channels};
      out.param(li, "bias").shape = {l.out_channels};
    } else if (l.kind == LayerKind::BatchNorm2d) {
      for (const char* part : {"gamma", "beta", "running_mean", "running_var"})
        out.param(li, part).shape = {l.out_channels};
    }
  }
  return out;
}

// Writes a sliced model's parameters (and BN running statistics) back into
// the retained positions of the full model; everything outside the config is
// untouched.
inline void scatter_params(ModelGraph& full, const ModelGraph& sliced, const SubnetConfig& cfg) {
  SliceMap map = build_slice_map(full, normalize_config(full, cfg));
  for (auto& [name, t] : full.params) {
    const Tensor& s = sliced.params.at(name);
    auto it = map.find(name);
    if (it == map.end()) {
      t.data = s.data;
      continue;
    }
    const std::vector<std::size_t>& idx = it->second;
    for (std::size_t j = 0; j < idx.size(); ++j) t.data[idx[j]] = s.data[j];
  }
}

// Adds the sliced model's gradients into the full model's gradient buffers
// and records which elements were touched (for masked optimizer steps).
inline void scatter_add_grads(ModelGraph& full, const ModelGraph& sliced, const SliceMap& map,
                              std::map<std::string, std::vector<char>>& touched) {
  for (auto& [name, t] : full.params) {
    const Tensor& s = sliced.params.at(name);
    if (s.grad.empty()) continue;
    t.ensure_grad();
    std::vector<char>& mask = touched[name];
    if (mask.size() != t.data.size()) mask.assign(t.data.size(), 0);
    auto it = map.find(name);
    if (it == map.end()) {
      for (std::size_t j = 0; j < t.grad.size(); ++j) {
        t.grad[j] += s.grad[j];
        mask[j] = 1;
      }
      continue;
    }
    const std::vector<std::size_t>& idx = it->second;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      t.grad[idx[j]] += s.grad[j];
      mask[idx[j]] = 1;
    }
  }
}

// Uniform width multiplier: every prunable layer keeps its first
// max(1, round-half-up(m * p)) channels.
inline SubnetConfig uniform_config(const ModelGraph& m, double multiplier) {
  if (multiplier <= 0.0 || multiplier > 1.0)
    throw ConfigError("width multiplier " + std::to_string(multiplier) + " outside (0,1]");
  SubnetConfig cfg;
  for (int l : prunable_layers(m)) {
    int p = m.layers[l].out_channels;
    int keep = std::max(1, static_cast<int>(std::floor(multiplier * p + 0.5)));
    cfg.retained[l] = full_range(keep);
  }
  return cfg;
}

// FLOPs (multiply-accumulates x2 over conv/linear) and parameter count under
// the sliced channel counts, walking spatial dims from the model's input
// size.
inline CostReport cost_of(const ModelGraph& m, const SubnetConfig& cfg_in, int input_hw) {
  validate_config(m, cfg_in);
  SubnetConfig cfg = normalize_config(m, cfg_in);
  auto walk = [&](const SubnetConfig& c) {
    long long flops = 0, params = 0;
    int h = input_hw, w = input_hw;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      const LayerSpec& l = m.layers[i];
      int li = static_cast<int>(i);
      switch (l.kind) {
        case LayerKind::Conv2d: {
          long long cin = static_cast<long long>(detail::retained_in(m, c, li).size());
          long long cout = static_cast<long long>(detail::retained_out(m, c, li)->size());
          h = detail::conv_out_dim(h, l.kernel, l.stride);
          w = detail::conv_out_dim(w, l.kernel, l.stride);
          flops += 2LL * cin * cout * l.kernel * l.kernel * h * w;
          params += cout * cin * l.kernel * l.kernel + cout;
          break;
        }
        case LayerKind::Linear: {
          int src = input_source(m, li);
          long long block = src < 0 ? 1 : l.in_channels / m.layers[src].out_channels;
          long long cin = src < 0 ? l.in_channels
                                  : block * static_cast<long long>(
                                                detail::retained_in(m, c, li).size());
          long long cout = static_cast<long long>(detail::retained_out(m, c, li)->size());
          flops += 2LL * cin * cout;
          params += cin * cout + cout;
          break;
        }
        case LayerKind::BatchNorm2d:
          params += 2LL * static_cast<long long>(detail::retained_in(m, c, li).size());
          break;
        case LayerKind::AvgPool2d:
          h = 1;
          w = 1;
          break;
        default:
          break;
      }
    }
    return std::pair<long long, long long>(flops, params);
  };
  auto [flops, params] = walk(cfg);
  auto [full_flops, full_params] = walk(full_config(m));
  (void)full_flops;
  CostReport r;
  r.flops = flops;
  r.params = params;
  r.size_ratio = full_params > 0 ? static_cast<double>(params) / full_params : 1.0;
  return r;
}

inline CostReport cost_of(const ModelGraph& m, const SubnetConfig& cfg) {
  return cost_of(m, cfg, m.input_hw);
}

// Set inclusion per layer; a layer missing from a config counts as fully
// retained.
inline bool config_subset(const SubnetConfig& small, const SubnetConfig& large) {
  for (const auto& [layer, sset] : small.retained) {
    auto it = large.retained.find(layer);
    if (it == large.retained.end()) continue;  // large keeps everything there
    const std::vector<int>& lset = it->second;
    if (!std::includes(lset.begin(), lset.end(), sset.begin(), sset.end())) return false;
  }
  // a layer which `large` restricts but `small` keeps full breaks inclusion
  for (const auto& [layer, lset] : large.retained) {
    (void)lset;
    if (!small.retained.count(layer)) {
      return false;
    }
  }
  return true;
}

// Pool ordered largest -> smallest: every later config must be a subset of
// every earlier one (checked pairwise-consecutively; inclusion is
// transitive).
inline bool check_nesting(const std::vector<SubnetConfig>& pool) {
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (!config_subset(pool[i], pool[i - 1])) return false;
  return true;
}

}  // namespace prosub
