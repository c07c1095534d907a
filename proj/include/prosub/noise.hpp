#pragma once

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/graph.hpp"
#include "prosub/train.hpp"

namespace prosub {

// Channel-wise trainable noise magnitudes: one beta per output channel of
// each prunable layer. When disabled, forwards are bit-identical to the
// plain model.
struct NoiseParams {
  std::map<int, Tensor> beta;  // prunable layer index -> [out_channels]
  bool enabled = true;
};

struct NoiseTrainConfig {
  int epochs = 3;
  float beta_init = 0.25f;
  bool train_weights = true;  // jointly update w alongside beta
  float beta_lr = 0.05f;
  TrainHyper hyper;  // weight optimizer + batch size
  std::uint64_t seed = 1;
};

inline NoiseParams make_noise(const ModelGraph& m, float beta_init) {
  NoiseParams np;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].prunable)
      np.beta[static_cast<int>(i)] =
          full_like(zeros({m.layers[i].out_channels}), beta_init);
  return np;
}

inline void validate_noise(const ModelGraph& m, const NoiseParams& np) {
  for (const auto& [layer, beta] : np.beta) {
    if (layer < 0 || layer >= static_cast<int>(m.layers.size()) || !m.layers[layer].prunable)
      throw ConfigError("noise attached to layer " + std::to_string(layer) +
                        " which is not a prunable layer");
    if (beta.numel() != static_cast<std::size_t>(m.layers[layer].out_channels))
      throw ConfigError("beta length " + std::to_string(beta.numel()) + " != out_channels " +
                        std::to_string(m.layers[layer].out_channels) + " at layer " +
                        std::to_string(layer));
  }
}

// Elements per output channel of a weight tensor (conv: in*k*k, linear: in).
inline std::size_t channel_stride(const Tensor& w) {
  std::size_t s = 1;
  for (std::size_t d = 1; d < w.shape.size(); ++d) s *= static_cast<std::size_t>(w.shape[d]);
  return s;
}

// Samples eta ~ N(0, sigma_l^2) element-wise per noisy layer, where sigma_l^2
// is the population variance of that layer's whole weight tensor (recomputed
// here, no gradient flows through it). All-zero weights give sigma = 0 and
// hence no perturbation.
inline std::map<int, Tensor> sample_noise(const ModelGraph& m, const NoiseParams& np,
                                          std::mt19937& rng) {
  std::map<int, Tensor> eta;
  for (const auto& [layer, beta] : np.beta) {
    (void)beta;
    const Tensor& w = m.param(layer, "weight");
    double mean = 0.0;
    for (float v : w.data) mean += v;
    mean /= static_cast<double>(w.data.size());
    double var = 0.0;
    for (float v : w.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.data.size());
    Tensor e(w.shape);
    if (var > 0.0) {
      std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(var)));
      for (auto& v : e.data) v = dist(rng);
    }
    eta[layer] = std::move(e);
  }
  return eta;
}

// Loss and gradients on the perturbed weights w~ = w + beta_c * eta for a
// fixed eta. Weight gradients land in the model's grad buffers (identity
// path dw~/dw = 1); beta gradients are the per-channel sum of grad(w~) * eta.
// Weights are restored before returning.
inline double noisy_backward(ModelGraph& m, NoiseParams& np, const Tensor& images,
                             const std::vector<int>& labels,
                             const std::map<int, Tensor>& eta,
                             std::map<int, Tensor>& beta_grads) {
  validate_noise(m, np);
  std::map<int, Tensor> saved;
  if (np.enabled) {
    for (const auto& [layer, beta] : np.beta) {
      Tensor& w = m.param(layer, "weight");
      saved[layer] = w;
      const Tensor& e = eta.at(layer);
      const std::size_t cs = channel_stride(w);
      for (int c = 0; c < w.shape[0]; ++c) {
        const float b = beta.data[c];
        float* wp = w.data.data() + c * cs;
        const float* ep = e.data.data() + c * cs;
        for (std::size_t j = 0; j < cs; ++j) wp[j] += b * ep[j];
      }
    }
  }
  m.zero_grads();
  Workspace ws;
  ForwardOptions fo;
  fo.training = true;
  Tensor logits = forward(m, images, fo, &ws);
  Tensor dlogits;
  double loss = cross_entropy(logits, labels, &dlogits);
  backward(m, images, dlogits, ws);
  beta_grads.clear();
  if (np.enabled) {
    for (const auto& [layer, beta] : np.beta) {
      const Tensor& w = m.param(layer, "weight");
      const Tensor& e = eta.at(layer);
      const std::size_t cs = channel_stride(w);
      Tensor bg(beta.shape);
      for (int c = 0; c < w.shape[0]; ++c) {
        const float* gp = w.grad.data() + c * cs;
        const float* ep = e.data.data() + c * cs;
        double acc = 0.0;
        for (std::size_t j = 0; j < cs; ++j) acc += static_cast<double>(gp[j]) * ep[j];
        bg.data[c] = static_cast<float>(acc);
      }
      beta_grads[layer] = std::move(bg);
    }
    for (auto& [layer, w] : saved) m.param(layer, "weight").data = std::move(w.data);
  }
  if (!std::isfinite(loss)) throw NumericError("noisy training loss is not finite");
  return loss;
}

// One noisy step: fresh eta, backward, plain SGD on beta (always) and
// momentum SGD on weights (when cfg.train_weights).
inline double noisy_train_step(ModelGraph& m, NoiseParams& np, const Tensor& images,
                               const std::vector<int>& labels, const NoiseTrainConfig& cfg,
                               Sgd& weight_opt, std::mt19937& rng) {
  auto eta = sample_noise(m, np, rng);
  std::map<int, Tensor> beta_grads;
  double loss = noisy_backward(m, np, images, labels, eta, beta_grads);
  for (auto& [layer, beta] : np.beta) {
    const Tensor& g = beta_grads.at(layer);
    for (std::size_t j = 0; j < beta.data.size(); ++j) beta.data[j] -= cfg.beta_lr * g.data[j];
  }
  if (cfg.train_weights) weight_opt.step(m);
  return loss;
}

// Full noise-training phase over the dataset. Returns final-epoch mean loss.
inline double noise_train(ModelGraph& m, NoiseParams& np, const Dataset& train,
                          const NoiseTrainConfig& cfg) {
  Sgd opt(cfg.hyper.lr, cfg.hyper.momentum);
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(cfg.seed, seed_salt::kNoise)));
  double mean_loss = 0.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    BatchStream stream(train, cfg.hyper.batch_size, mix_seed(cfg.seed, seed_salt::kNoise) + 1 + e);
    double sum = 0.0;
    int batches = 0;
    Tensor images;
    std::vector<int> labels;
    while (stream.next(images, labels)) {
      sum += noisy_train_step(m, np, images, labels, cfg, opt, rng);
      ++batches;
    }
    mean_loss = batches ? sum / batches : 0.0;
  }
  return mean_loss;
}

}  // namespace prosub
