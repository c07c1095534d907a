#pragma once

#include <map>
#include <string>
#include <vector>

#include "prosub/data.hpp"
#include "prosub/graph.hpp"

namespace prosub {

struct TrainHyper {
  float lr = 0.05f;
  float momentum = 0.9f;
  int batch_size = 64;
};

// Momentum SGD: v = momentum*v + g; w -= lr*v. Velocity buffers are keyed by
// parameter name and created lazily so the same optimizer can serve models
// whose parameter sets differ across steps (fused training).
struct Sgd {
  float lr = 0.05f;
  float momentum = 0.9f;
  std::map<std::string, Tensor> velocity;

  Sgd() = default;
  Sgd(float lr_, float momentum_) : lr(lr_), momentum(momentum_) {}

  void step(ModelGraph& m) {
    for (auto& [name, t] : m.params) {
      if (t.grad.empty()) continue;
      if (name.find("running_") != std::string::npos) continue;  // BN stats are not trained
      Tensor& v = velocity[name];
      if (v.data.size() != t.data.size()) v = Tensor(t.shape);
      for (std::size_t j = 0; j < t.data.size(); ++j) {
        v.data[j] = momentum * v.data[j] + t.grad[j];
        t.data[j] -= lr * v.data[j];
      }
    }
  }
};

// One forward/backward/update on a batch. Returns the batch loss.
inline double train_step(ModelGraph& m, Sgd& opt, const Tensor& images,
                         const std::vector<int>& labels) {
  m.zero_grads();
  Workspace ws;
  ForwardOptions fo;
  fo.training = true;
  Tensor logits = forward(m, images, fo, &ws);
  Tensor dlogits;
  double loss = cross_entropy(logits, labels, &dlogits);
  backward(m, images, dlogits, ws);
  opt.step(m);
  return loss;
}

// Top-1 accuracy over a dataset, eval-mode forward in fixed-size batches.
inline double evaluate_accuracy(const ModelGraph& m, const Dataset& ds, int batch_size = 256) {
  if (ds.count() == 0) throw DataError("evaluate_accuracy: empty dataset");
  int correct = 0;
  const int k = m.num_classes;
  for (int start = 0; start < ds.count(); start += batch_size) {
    int n = std::min(batch_size, ds.count() - start);
    std::vector<int> idx(n);
    for (int j = 0; j < n; ++j) idx[j] = start + j;
    auto [images, labels] = ds.gather(idx);
    Tensor logits = forward_eval(m, images);
    for (int ni = 0; ni < n; ++ni) {
      const float* z = logits.data.data() + static_cast<std::size_t>(ni) * k;
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (z[j] > z[best]) best = j;
      if (best == labels[ni]) ++correct;
    }
  }
  return static_cast<double>(correct) / ds.count();
}

// Epoch-based training with seeded shuffling. Returns final-epoch mean loss.
inline double train_epochs(ModelGraph& m, const Dataset& ds, const TrainHyper& hp, int epochs,
                           std::uint64_t seed) {
  Sgd opt(hp.lr, hp.momentum);
  double mean_loss = 0.0;
  for (int e = 0; e < epochs; ++e) {
    BatchStream stream(ds, hp.batch_size, mix_seed(seed, seed_salt::kPretrain) + e);
    double sum = 0.0;
    int batches = 0;
    Tensor images;
    std::vector<int> labels;
    while (stream.next(images, labels)) {
      sum += train_step(m, opt, images, labels);
      ++batches;
    }
    mean_loss = batches ? sum / batches : 0.0;
  }
  return mean_loss;
}

}  // namespace prosub
