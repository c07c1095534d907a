#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/tensor.hpp"

namespace prosub {

enum class LayerKind { Conv2d, Linear, BatchNorm2d, Relu, AvgPool2d, Flatten, ResidualAdd };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Linear: return "linear";
    case LayerKind::BatchNorm2d: return "batchnorm2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool2d: return "avgpool2d";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::ResidualAdd: return "residual-add";
  }
  return "?";
}

// One layer of the chain. Every layer takes its input from the previous
// layer; residual-add additionally references an earlier layer via `from`.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;      // conv only
  int stride = 1;
  bool prunable = false;
  std::string tie_group;  // empty = none
  int from = -1;          // residual-add: index of the skip producer
};

inline constexpr float kBnEps = 1e-5f;
inline constexpr float kBnMomentum = 0.1f;  // running = (1-m)*running + m*batch

// Layer graph plus a named tensor table. Keys are "layer<i>.<part>" with
// parts weight/bias (conv, linear) and gamma/beta/running_mean/running_var
// (batchnorm2d).
struct ModelGraph {
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> params;
  int num_classes = 0;
  int input_hw = 32;  // square input spatial size; cost accounting depends on it

  static std::string key(int layer, const char* part) {
    return "layer" + std::to_string(layer) + "." + part;
  }
  Tensor& param(int layer, const char* part) { return params.at(key(layer, part)); }
  const Tensor& param(int layer, const char* part) const { return params.at(key(layer, part)); }
  bool has_param(int layer, const char* part) const { return params.count(key(layer, part)) > 0; }

  bool is_parametric(int i) const {
    LayerKind k = layers[i].kind;
    return k == LayerKind::Conv2d || k == LayerKind::Linear || k == LayerKind::BatchNorm2d;
  }

  void zero_grads() {
    for (auto& [name, t] : params) {
      (void)name;
      t.ensure_grad();
      t.zero_grad();
    }
  }
};

// Nearest upstream conv/linear whose output channels flow into layer i's
// input; -1 means the network input. Pass-through layers (relu, bn, pool,
// flatten, residual-add) forward their producer's source.
inline int channel_source(const ModelGraph& m, int i) {
  while (i >= 0) {
    LayerKind k = m.layers[i].kind;
    if (k == LayerKind::Conv2d || k == LayerKind::Linear) return i;
    --i;  // residual-add producers are tie-constrained to equal sets; follow the chain side
  }
  return -1;
}

// Source feeding layer i's input.
inline int input_source(const ModelGraph& m, int i) { return channel_source(m, i - 1); }

inline void validate_spec(const std::vector<LayerSpec>& spec, int num_classes) {
  if (spec.empty()) throw ConfigError("build_model: empty layer list");
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    if (l.prunable && l.kind != LayerKind::Conv2d && l.kind != LayerKind::Linear)
      throw ConfigError("layer " + std::to_string(i) + ": only conv2d/linear may be prunable");
    if (l.kind == LayerKind::Conv2d && l.kernel < 1)
      throw ConfigError("layer " + std::to_string(i) + ": conv2d needs a positive kernel");
    if (l.kind == LayerKind::ResidualAdd) {
      if (l.from < 0 || l.from >= static_cast<int>(i) - 1)
        throw ConfigError("layer " + std::to_string(i) +
                          ": residual-add needs from=<earlier layer index>");
      if (spec[l.from].out_channels != spec[i - 1].out_channels)
        throw ConfigError("layer " + std::to_string(i) + ": residual-add producers " +
                          std::to_string(l.from) + " and " + std::to_string(i - 1) +
                          " have unequal channel counts");
    }
    if (i > 0 && l.kind != LayerKind::Flatten) {
      int prev_out = spec[i - 1].out_channels;
      // Linear consumers after flatten are checked at forward time (their
      // input width depends on spatial dims).
      bool after_flatten = spec[i - 1].kind == LayerKind::Flatten;
      if (!(l.kind == LayerKind::Linear && after_flatten) && l.in_channels != prev_out)
        throw ConfigError("channel mismatch between layers " + std::to_string(i - 1) + " and " +
                          std::to_string(i) + ": " + std::to_string(prev_out) + " vs " +
                          std::to_string(l.in_channels));
    }
  }
  if (spec.back().out_channels != num_classes)
    throw ConfigError("final layer produces " + std::to_string(spec.back().out_channels) +
                      " outputs, expected num_classes = " + std::to_string(num_classes));
}

// Kaiming-style fan-in scaled uniform init for conv/linear weights; zero
// biases; BN scale 1, shift 0. Deterministic under seed.
inline ModelGraph build_model(const std::vector<LayerSpec>& spec, int num_classes,
                              std::uint64_t seed) {
  validate_spec(spec, num_classes);
  ModelGraph m;
  m.layers = spec;
  m.num_classes = num_classes;
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(seed, seed_salt::kInit)));
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    int li = static_cast<int>(i);
    if (l.kind == LayerKind::Conv2d) {
      Tensor w({l.out_channels, l.in_channels, l.kernel, l.kernel});
      float bound = std::sqrt(6.0f / static_cast<float>(l.in_channels * l.kernel * l.kernel));
      fill_uniform(w, -bound, bound, rng);
      m.params[ModelGraph::key(li, "weight")] = std::move(w);
      m.params[ModelGraph::key(li, "bias")] = zeros({l.out_channels});
    } else if (l.kind == LayerKind::Linear) {
      Tensor w({l.out_channels, l.in_channels});
      float bound = std::sqrt(6.0f / static_cast<float>(l.in_channels));
      fill_uniform(w, -bound, bound, rng);
      m.params[ModelGraph::key(li, "weight")] = std::move(w);
      m.params[ModelGraph::key(li, "bias")] = zeros({l.out_channels});
    } else if (l.kind == LayerKind::BatchNorm2d) {
      m.params[ModelGraph::key(li, "gamma")] = full_like(zeros({l.out_channels}), 1.0f);
      m.params[ModelGraph::key(li, "beta")] = zeros({l.out_channels});
      m.params[ModelGraph::key(li, "running_mean")] = zeros({l.out_channels});
      m.params[ModelGraph::key(li, "running_var")] = full_like(zeros({l.out_channels}), 1.0f);
    }
  }
  return m;
}

// Per-forward cached state needed by backward and by BN recalibration.
struct Workspace {
  std::vector<Tensor> act;      // output of each layer
  std::vector<Tensor> bn_mean;  // batch mean per BN layer (biased stats)
  std::vector<Tensor> bn_var;   // batch variance per BN layer
};

struct ForwardOptions {
  bool training = false;        // BN uses batch stats and caches for backward
  bool update_running = true;   // training only: EMA-update running stats
};

namespace detail {

inline int conv_out_dim(int in, int k, int s) {
  int pad = k / 2;
  return (in + 2 * pad - k) / s + 1;
}

inline void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                           Tensor& y) {
  const int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int cout = w.shape[0], k = w.shape[3];
  const int pad = k / 2;
  const int ho = conv_out_dim(h, k, stride), wo = conv_out_dim(wd, k, stride);
  y = Tensor({n, cout, ho, wo});
  const std::size_t xs_c = static_cast<std::size_t>(h) * wd;
  const std::size_t ws_o = static_cast<std::size_t>(cin) * k * k;
  for (int ni = 0; ni < n; ++ni) {
    const float* xb = x.data.data() + static_cast<std::size_t>(ni) * cin * xs_c;
    float* yb = y.data.data() + static_cast<std::size_t>(ni) * cout * ho * wo;
    for (int o = 0; o < cout; ++o) {
      const float* wo_ = w.data.data() + o * ws_o;
      const float bias = b.data[o];
      for (int yy = 0; yy < ho; ++yy) {
        for (int xx = 0; xx < wo; ++xx) {
          double acc = bias;
          for (int c = 0; c < cin; ++c) {
            const float* xc = xb + c * xs_c;
            const float* wc = wo_ + c * k * k;
            for (int ky = 0; ky < k; ++ky) {
              int iy = yy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                int ix = xx * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(wc[ky * k + kx]) * xc[iy * wd + ix];
              }
            }
          }
          yb[(o * ho + yy) * wo + xx] = static_cast<float>(acc);
        }
      }
    }
  }
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, int stride, const Tensor& dy,
                            Tensor& dw, Tensor& db, Tensor* dx) {
  const int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int cout = w.shape[0], k = w.shape[3];
  const int pad = k / 2;
  const int ho = dy.shape[2], wo = dy.shape[3];
  const std::size_t xs_c = static_cast<std::size_t>(h) * wd;
  const std::size_t ws_o = static_cast<std::size_t>(cin) * k * k;
  for (int ni = 0; ni < n; ++ni) {
    const float* xb = x.data.data() + static_cast<std::size_t>(ni) * cin * xs_c;
    float* dxb = dx ? dx->data.data() + static_cast<std::size_t>(ni) * cin * xs_c : nullptr;
    const float* dyb = dy.data.data() + static_cast<std::size_t>(ni) * cout * ho * wo;
    for (int o = 0; o < cout; ++o) {
      float* dwo = dw.data.data() + o * ws_o;
      const float* wo_ = w.data.data() + o * ws_o;
      for (int yy = 0; yy < ho; ++yy) {
        for (int xx = 0; xx < wo; ++xx) {
          const float g = dyb[(o * ho + yy) * wo + xx];
          if (g == 0.0f) continue;
          db.data[o] += g;
          for (int c = 0; c < cin; ++c) {
            const float* xc = xb + c * xs_c;
            float* dxc = dxb ? dxb + c * xs_c : nullptr;
            float* dwc = dwo + c * k * k;
            const float* wc = wo_ + c * k * k;
            for (int ky = 0; ky < k; ++ky) {
              int iy = yy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                int ix = xx * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                dwc[ky * k + kx] += g * xc[iy * wd + ix];
                if (dxc) dxc[iy * wd + ix] += g * wc[ky * k + kx];
              }
            }
          }
        }
      }
    }
  }
}

inline void linear_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const int n = x.shape[0];
  const int fin = w.shape[1], fout = w.shape[0];
  if (x.shape.size() != 2 || x.shape[1] != fin)
    throw ConfigError("linear layer expects " + std::to_string(fin) + " input features, got " +
                      shape_str(x.shape) + " (add a flatten layer before linear)");
  y = Tensor({n, fout});
  for (int ni = 0; ni < n; ++ni) {
    const float* xr = x.data.data() + static_cast<std::size_t>(ni) * fin;
    for (int o = 0; o < fout; ++o) {
      const float* wr = w.data.data() + static_cast<std::size_t>(o) * fin;
      double acc = b.data[o];
      for (int i = 0; i < fin; ++i) acc += static_cast<double>(wr[i]) * xr[i];
      y.data[static_cast<std::size_t>(ni) * fout + o] = static_cast<float>(acc);
    }
  }
}

inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw,
                            Tensor& db, Tensor* dx) {
  const int n = x.shape[0];
  const int fin = w.shape[1], fout = w.shape[0];
  for (int ni = 0; ni < n; ++ni) {
    const float* xr = x.data.data() + static_cast<std::size_t>(ni) * fin;
    float* dxr = dx ? dx->data.data() + static_cast<std::size_t>(ni) * fin : nullptr;
    const float* dyr = dy.data.data() + static_cast<std::size_t>(ni) * fout;
    for (int o = 0; o < fout; ++o) {
      const float g = dyr[o];
      if (g == 0.0f) continue;
      db.data[o] += g;
      float* dwr = dw.data.data() + static_cast<std::size_t>(o) * fin;
      const float* wr = w.data.data() + static_cast<std::size_t>(o) * fin;
      for (int i = 0; i < fin; ++i) {
        dwr[i] += g * xr[i];
        if (dxr) dxr[i] += g * wr[i];
      }
    }
  }
}

}  // namespace detail

// Runs the graph on a batch. In training mode a Workspace must be supplied;
// it caches per-layer activations and BN batch statistics for backward.
inline Tensor forward(ModelGraph& m, const Tensor& input, const ForwardOptions& opt,
                      Workspace* ws = nullptr) {
  if (opt.training && !ws) throw ConfigError("training forward requires a workspace");
  const std::size_t L = m.layers.size();
  std::vector<Tensor> local_act;
  std::vector<Tensor>& act = ws ? ws->act : local_act;
  act.assign(L, Tensor());
  if (ws) {
    ws->bn_mean.assign(L, Tensor());
    ws->bn_var.assign(L, Tensor());
  }

  for (std::size_t i = 0; i < L; ++i) {
    const LayerSpec& l = m.layers[i];
    const Tensor& x = (i == 0) ? input : act[i - 1];
    Tensor& y = act[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (x.shape.size() != 4 || x.shape[1] != l.in_channels)
          throw ConfigError("layer " + std::to_string(i) + ": conv2d expects " +
                            std::to_string(l.in_channels) + " input channels, got " +
                            shape_str(x.shape));
        detail::conv2d_forward(x, m.param(i, "weight"), m.param(i, "bias"), l.stride, y);
        break;
      case LayerKind::Linear:
        detail::linear_forward(x, m.param(i, "weight"), m.param(i, "bias"), y);
        break;
      case LayerKind::BatchNorm2d: {
        const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        y = Tensor(x.shape);
        const Tensor& gamma = m.param(i, "gamma");
        const Tensor& beta = m.param(i, "beta");
        Tensor mean({c}), var({c});
        if (opt.training) {
          const double count = static_cast<double>(n) * plane;
          for (int ci = 0; ci < c; ++ci) {
            double s = 0.0, s2 = 0.0;
            for (int ni = 0; ni < n; ++ni) {
              const float* p = x.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
              for (std::size_t j = 0; j < plane; ++j) {
                s += p[j];
                s2 += static_cast<double>(p[j]) * p[j];
              }
            }
            double mu = s / count;
            mean.data[ci] = static_cast<float>(mu);
            var.data[ci] = static_cast<float>(s2 / count - mu * mu);  // biased
          }
          if (opt.update_running) {
            Tensor& rm = m.param(i, "running_mean");
            Tensor& rv = m.param(i, "running_var");
            // unbiased variance feeds the running estimate
            double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
            for (int ci = 0; ci < c; ++ci) {
              rm.data[ci] = (1.0f - kBnMomentum) * rm.data[ci] + kBnMomentum * mean.data[ci];
              rv.data[ci] = (1.0f - kBnMomentum) * rv.data[ci] +
                            kBnMomentum * static_cast<float>(var.data[ci] * unbias);
            }
          }
        } else {
          mean = m.param(i, "running_mean");
          var = m.param(i, "running_var");
        }
        for (int ci = 0; ci < c; ++ci) {
          const float inv = 1.0f / std::sqrt(var.data[ci] + kBnEps);
          const float g = gamma.data[ci], bt = beta.data[ci], mu = mean.data[ci];
          for (int ni = 0; ni < n; ++ni) {
            const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t j = 0; j < plane; ++j)
              y.data[off + j] = (x.data[off + j] - mu) * inv * g + bt;
          }
        }
        if (ws) {
          ws->bn_mean[i] = std::move(mean);
          ws->bn_var[i] = std::move(var);
        }
        break;
      }
      case LayerKind::Relu:
        y = Tensor(x.shape);
        for (std::size_t j = 0; j < x.data.size(); ++j)
          y.data[j] = x.data[j] > 0.0f ? x.data[j] : 0.0f;
        break;
      case LayerKind::AvgPool2d: {
        // global average pool to 1x1
        const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        y = Tensor({n, c, 1, 1});
        for (int ni = 0; ni < n; ++ni)
          for (int ci = 0; ci < c; ++ci) {
            const float* p = x.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
            double s = 0.0;
            for (std::size_t j = 0; j < plane; ++j) s += p[j];
            y.data[static_cast<std::size_t>(ni) * c + ci] =
                static_cast<float>(s / static_cast<double>(plane));
          }
        break;
      }
      case LayerKind::Flatten: {
        const int n = x.shape[0];
        int feat = 1;
        for (std::size_t d = 1; d < x.shape.size(); ++d) feat *= x.shape[d];
        y = Tensor({n, feat});
        y.data = x.data;
        break;
      }
      case LayerKind::ResidualAdd: {
        const Tensor& a = act[i - 1];
        const Tensor& b = act[l.from];  // validate_spec guarantees from >= 0
        if (a.shape != b.shape)
          throw ConfigError("layer " + std::to_string(i) + ": residual-add shape mismatch " +
                            shape_str(a.shape) + " vs " + shape_str(b.shape));
        y = Tensor(a.shape);
        for (std::size_t j = 0; j < a.data.size(); ++j) y.data[j] = a.data[j] + b.data[j];
        break;
      }
    }
  }
  return act[L - 1];
}

inline Tensor forward_eval(const ModelGraph& m, const Tensor& input) {
  ForwardOptions opt;
  opt.training = false;
  return forward(const_cast<ModelGraph&>(m), input, opt, nullptr);  // eval path never mutates
}

// Softmax cross-entropy, mean over the batch. Returns loss; writes
// dL/dlogits when dlogits is non-null.
inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            Tensor* dlogits = nullptr) {
  const int n = logits.shape[0], k = logits.shape[1];
  if (static_cast<int>(labels.size()) != n)
    throw DataError("label count " + std::to_string(labels.size()) + " != batch size " +
                    std::to_string(n));
  if (dlogits) *dlogits = Tensor(logits.shape);
  double loss = 0.0;
  for (int ni = 0; ni < n; ++ni) {
    const float* z = logits.data.data() + static_cast<std::size_t>(ni) * k;
    int label = labels[ni];
    if (label < 0 || label >= k)
      throw DataError("label " + std::to_string(label) + " out of range [0," + std::to_string(k) +
                      ") at batch position " + std::to_string(ni));
    double zmax = z[0];
    for (int j = 1; j < k; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    loss += std::log(sum) - (z[label] - zmax);
    if (dlogits) {
      float* d = dlogits->data.data() + static_cast<std::size_t>(ni) * k;
      for (int j = 0; j < k; ++j) d[j] = static_cast<float>(std::exp(z[j] - zmax) / sum / n);
      d[label] -= 1.0f / n;
    }
  }
  return loss / n;
}

// Backpropagates dlogits through the graph, accumulating parameter gradients
// into each tensor's grad buffer. Requires the Workspace of the matching
// training-mode forward.
inline void backward(ModelGraph& m, const Tensor& input, const Tensor& dlogits, Workspace& ws) {
  const std::size_t L = m.layers.size();
  std::vector<Tensor> dact(L);
  dact[L - 1] = dlogits;
  for (auto& [name, t] : m.params) {
    (void)name;
    t.ensure_grad();
  }

  for (std::size_t ii = L; ii-- > 0;) {
    const LayerSpec& l = m.layers[ii];
    if (dact[ii].data.empty()) continue;  // no gradient flowed here
    const Tensor& dy = dact[ii];
    const Tensor& x = (ii == 0) ? input : ws.act[ii - 1];
    const bool need_dx = ii > 0;
    Tensor* dx = nullptr;
    auto ensure_dact = [&](std::size_t j, const std::vector<int>& shape) -> Tensor& {
      if (dact[j].data.empty()) dact[j] = Tensor(shape);
      return dact[j];
    };
    switch (l.kind) {
      case LayerKind::Conv2d: {
        Tensor& w = m.param(ii, "weight");
        Tensor& b = m.param(ii, "bias");
        Tensor dwl(w.shape), dbl(b.shape);
        if (need_dx) dx = &ensure_dact(ii - 1, x.shape);
        detail::conv2d_backward(x, w, l.stride, dy, dwl, dbl, dx);
        for (std::size_t j = 0; j < w.grad.size(); ++j) w.grad[j] += dwl.data[j];
        for (std::size_t j = 0; j < b.grad.size(); ++j) b.grad[j] += dbl.data[j];
        break;
      }
      case LayerKind::Linear: {
        Tensor& w = m.param(ii, "weight");
        Tensor& b = m.param(ii, "bias");
        Tensor dwl(w.shape), dbl(b.shape);
        if (need_dx) dx = &ensure_dact(ii - 1, x.shape);
        detail::linear_backward(x, w, dy, dwl, dbl, dx);
        for (std::size_t j = 0; j < w.grad.size(); ++j) w.grad[j] += dwl.data[j];
        for (std::size_t j = 0; j < b.grad.size(); ++j) b.grad[j] += dbl.data[j];
        break;
      }
      case LayerKind::BatchNorm2d: {
        const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const double count = static_cast<double>(n) * plane;
        Tensor& gamma = m.param(ii, "gamma");
        Tensor& beta = m.param(ii, "beta");
        gamma.ensure_grad();
        beta.ensure_grad();
        const Tensor& mean = ws.bn_mean[ii];
        const Tensor& var = ws.bn_var[ii];
        if (mean.data.empty())
          throw ConfigError("backward through batchnorm requires a training-mode forward");
        if (need_dx) dx = &ensure_dact(ii - 1, x.shape);
        for (int ci = 0; ci < c; ++ci) {
          const float inv = 1.0f / std::sqrt(var.data[ci] + kBnEps);
          const float mu = mean.data[ci];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int ni = 0; ni < n; ++ni) {
            const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              const double g = dy.data[off + j];
              sum_dy += g;
              sum_dy_xhat += g * (x.data[off + j] - mu) * inv;
            }
          }
          gamma.grad[ci] += static_cast<float>(sum_dy_xhat);
          beta.grad[ci] += static_cast<float>(sum_dy);
          if (dx) {
            const double gc = gamma.data[ci];
            const double m_dy = sum_dy / count, m_dy_xhat = sum_dy_xhat / count;
            for (int ni = 0; ni < n; ++ni) {
              const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
              for (std::size_t j = 0; j < plane; ++j) {
                const double xhat = (x.data[off + j] - mu) * inv;
                dx->data[off + j] += static_cast<float>(
                    gc * inv * (dy.data[off + j] - m_dy - xhat * m_dy_xhat));
              }
            }
          }
        }
        break;
      }
      case LayerKind::Relu: {
        if (!need_dx) break;
        dx = &ensure_dact(ii - 1, x.shape);
        const Tensor& y = ws.act[ii];
        for (std::size_t j = 0; j < y.data.size(); ++j)
          if (y.data[j] > 0.0f) dx->data[j] += dy.data[j];
        break;
      }
      case LayerKind::AvgPool2d: {
        if (!need_dx) break;
        dx = &ensure_dact(ii - 1, x.shape);
        const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const float scale = 1.0f / static_cast<float>(plane);
        for (int ni = 0; ni < n; ++ni)
          for (int ci = 0; ci < c; ++ci) {
            const float g = dy.data[static_cast<std::size_t>(ni) * c + ci] * scale;
            float* p = dx->data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t j = 0; j < plane; ++j) p[j] += g;
          }
        break;
      }
      case LayerKind::Flatten: {
        if (!need_dx) break;
        dx = &ensure_dact(ii - 1, x.shape);
        for (std::size_t j = 0; j < dy.data.size(); ++j) dx->data[j] += dy.data[j];
        break;
      }
      case LayerKind::ResidualAdd: {
        Tensor& da = ensure_dact(ii - 1, ws.act[ii - 1].shape);
        for (std::size_t j = 0; j < dy.data.size(); ++j) da.data[j] += dy.data[j];
        if (l.from >= 0) {
          Tensor& db2 = ensure_dact(l.from, ws.act[l.from].shape);
          for (std::size_t j = 0; j < dy.data.size(); ++j) db2.data[j] += dy.data[j];
        }
        break;
      }
    }
  }
}

// Output shape for a given input shape; pure function of the spec chain.
inline std::vector<int> infer_output_shape(const ModelGraph& m, std::vector<int> s) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        s = {s[0], l.out_channels, detail::conv_out_dim(s[2], l.kernel, l.stride),
             detail::conv_out_dim(s[3], l.kernel, l.stride)};
        break;
      case LayerKind::Linear:
        s = {s[0], l.out_channels};
        break;
      case LayerKind::AvgPool2d:
        s = {s[0], s[1], 1, 1};
        break;
      case LayerKind::Flatten: {
        int feat = 1;
        for (std::size_t d = 1; d < s.size(); ++d) feat *= s[d];
        s = {s[0], feat};
        break;
      }
      default:
        break;
    }
  }
  return s;
}

}  // namespace prosub
