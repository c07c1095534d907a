// Central finite-difference checks of every analytic gradient path against
// the independent double-precision reference in fd_reference.hpp.

#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <random>
#include <vector>

#include "fd_reference.hpp"
#include "prosub/prosub.hpp"

namespace {

using prosub::LayerKind;
using prosub::LayerSpec;
using prosub::ModelGraph;
using prosub::Tensor;

constexpr double kFdStep = 1e-3;

struct Instance {
  ModelGraph model;
  Tensor images;
  std::vector<int> labels;
};

Instance make_instance(const std::vector<LayerSpec>& spec, int classes,
                       std::vector<int> input_shape, std::uint64_t seed) {
  Instance in;
  in.model = prosub::build_model(spec, classes, seed);
  in.images = Tensor(std::move(input_shape));
  std::mt19937 rng(static_cast<std::uint32_t>(seed * 977 + 13));
  prosub::fill_normal(in.images, 0.0f, 1.0f, rng);
  std::uniform_int_distribution<int> lab(0, classes - 1);
  in.labels.resize(in.images.shape[0]);
  for (int& l : in.labels) l = lab(rng);
  return in;
}

// Training-mode forward + loss + backward; also asserts the implementation's
// loss agrees with the reference forward, so the two computations are checked
// against each other before their gradients are.
double run_backward(Instance& in) {
  in.model.zero_grads();
  prosub::Workspace ws;
  prosub::ForwardOptions fo;
  fo.training = true;
  fo.update_running = false;
  Tensor logits = prosub::forward(in.model, in.images, fo, &ws);
  Tensor dlogits;
  double loss = prosub::cross_entropy(logits, in.labels, &dlogits);
  prosub::backward(in.model, in.images, dlogits, ws);
  double ref = refmath::ref_loss(in.model, in.images, in.labels);
  REQUIRE(std::abs(loss - ref) <= 1e-4 * std::max(1.0, std::abs(ref)));
  return loss;
}

// FD-checks every element of one parameter tensor's gradient, refining the
// step where a ReLU kink biases the plain central difference.
void check_tensor(const Instance& in, const std::string& name) {
  const Tensor& t = in.model.params.at(name);
  for (std::size_t j = 0; j < t.data.size(); ++j) {
    double an = t.grad[j];
    INFO(name << "[" << j << "]: analytic=" << an);
    REQUIRE(refmath::fd_confirms(in.model, name, j, in.images, in.labels, an, kFdStep));
  }
}

}  // namespace

TEST_CASE("softmax cross-entropy gradient matches central differences", "[gradients]") {
  for (std::uint64_t i = 0; i < 20; ++i) {
    std::mt19937 rng(static_cast<std::uint32_t>(100 + i));
    int n = 2 + static_cast<int>(i % 3);
    int k = 2 + static_cast<int>(i % 5);
    Tensor logits({n, k});
    prosub::fill_normal(logits, 0.0f, 2.0f, rng);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> lab(0, k - 1);
    for (int& l : labels) l = lab(rng);

    Tensor dlogits;
    prosub::cross_entropy(logits, labels, &dlogits);
    for (std::size_t j = 0; j < logits.data.size(); ++j) {
      refmath::RefTensor z = refmath::widen(logits);
      double saved = z.v[j];
      z.v[j] = saved + kFdStep;
      double up = refmath::ref_cross_entropy(z, labels);
      z.v[j] = saved - kFdStep;
      double down = refmath::ref_cross_entropy(z, labels);
      double fd = (up - down) / (2.0 * kFdStep);
      INFO("instance " << i << " logit " << j);
      REQUIRE(refmath::grad_close(dlogits.data[j], fd));
    }
  }
}

TEST_CASE("linear layer gradients match central differences", "[gradients]") {
  using prosub::detail::linear;
  for (std::uint64_t i = 0; i < 20; ++i) {
    int classes = 2 + static_cast<int>(i % 4);
    int features = 2 + static_cast<int>(i % 5);
    int batch = 2 + static_cast<int>(i % 2);
    Instance in = make_instance({linear(features, classes, false)}, classes, {batch, features},
                                300 + i);
    run_backward(in);
    check_tensor(in, "layer0.weight");
    check_tensor(in, "layer0.bias");
  }
}

TEST_CASE("conv2d gradients match central differences", "[gradients]") {
  using prosub::detail::conv;
  using prosub::detail::linear;
  using prosub::detail::plain;
  for (std::uint64_t i = 0; i < 20; ++i) {
    int cin = 1 + static_cast<int>(i % 3);
    int cout = 1 + static_cast<int>(i % 4);
    int k = (i % 2 == 0) ? 3 : 1;
    int stride = (i % 3 == 0) ? 2 : 1;
    int hw = 3 + static_cast<int>(i % 3);
    int batch = 2 + static_cast<int>(i % 2);
    int classes = 2 + static_cast<int>(i % 3);
    int ho = prosub::detail::conv_out_dim(hw, k, stride);
    Instance in = make_instance(
        {conv(cin, cout, k, stride, true), plain(LayerKind::Flatten, cout),
         linear(cout * ho * ho, classes, false)},
        classes, {batch, cin, hw, hw}, 500 + i);
    run_backward(in);
    check_tensor(in, "layer0.weight");
    check_tensor(in, "layer0.bias");
  }
}

TEST_CASE("batchnorm training-mode gradients match central differences", "[gradients]") {
  using prosub::detail::conv;
  using prosub::detail::linear;
  using prosub::detail::plain;
  for (std::uint64_t i = 0; i < 20; ++i) {
    int cin = 1 + static_cast<int>(i % 2);
    int c = 2 + static_cast<int>(i % 3);
    int hw = 3 + static_cast<int>(i % 2);
    int batch = 2 + static_cast<int>(i % 2);
    int classes = 2 + static_cast<int>(i % 3);
    Instance in = make_instance(
        {conv(cin, c, 3, 1, true), plain(LayerKind::BatchNorm2d, c), plain(LayerKind::Relu, c),
         plain(LayerKind::AvgPool2d, c), plain(LayerKind::Flatten, c),
         linear(c, classes, false)},
        classes, {batch, cin, hw, hw}, 700 + i);
    run_backward(in);
    check_tensor(in, "layer1.gamma");
    check_tensor(in, "layer1.beta");
    // dL/dx through the normalization also exercises the batch-stat terms.
    check_tensor(in, "layer0.weight");
  }
}

TEST_CASE("residual and pooling graph gradients match central differences", "[gradients]") {
  using prosub::detail::conv;
  using prosub::detail::linear;
  using prosub::detail::plain;
  using prosub::detail::res_add;
  std::vector<LayerSpec> spec = {
      conv(2, 3, 3, 1, true),            // 0
      plain(LayerKind::BatchNorm2d, 3),  // 1
      plain(LayerKind::Relu, 3),         // 2
      conv(3, 3, 3, 1, true),            // 3
      plain(LayerKind::BatchNorm2d, 3),  // 4
      res_add(3, 2),                     // 5
      plain(LayerKind::Relu, 3),         // 6
      plain(LayerKind::AvgPool2d, 3),    // 7
      plain(LayerKind::Flatten, 3),      // 8
      linear(3, 2, false),               // 9
  };
  Instance in = make_instance(spec, 2, {3, 2, 4, 4}, 900);
  run_backward(in);
  for (const auto& [name, t] : in.model.params) {
    if (name.find("running_") != std::string::npos) continue;
    (void)t;
    check_tensor(in, name);
  }
}

TEST_CASE("noise-path beta gradients match central differences", "[gradients]") {
  using prosub::detail::conv;
  using prosub::detail::linear;
  using prosub::detail::plain;
  for (std::uint64_t i = 0; i < 20; ++i) {
    int cin = 1 + static_cast<int>(i % 2);
    int cout = 2 + static_cast<int>(i % 3);
    int hw = 3 + static_cast<int>(i % 2);
    int batch = 2 + static_cast<int>(i % 2);
    int classes = 2 + static_cast<int>(i % 3);
    Instance in = make_instance(
        {conv(cin, cout, 3, 1, true), plain(LayerKind::Relu, cout),
         plain(LayerKind::AvgPool2d, cout), plain(LayerKind::Flatten, cout),
         linear(cout, classes, false)},
        classes, {batch, cin, hw, hw}, 1100 + i);

    prosub::NoiseParams np = prosub::make_noise(in.model, 0.25f);
    std::mt19937 rng(static_cast<std::uint32_t>(40 + i));
    for (auto& [layer, beta] : np.beta) {
      (void)layer;
      prosub::fill_normal(beta, 0.25f, 0.3f, rng);
    }
    auto eta = prosub::sample_noise(in.model, np, rng);

    std::map<int, Tensor> beta_grads;
    double loss = prosub::noisy_backward(in.model, np, in.images, in.labels, eta, beta_grads);

    // Loss as a function of one beta entry, on the double reference.
    auto loss_at = [&](int layer, int channel, double shift) {
      std::map<std::string, Tensor> params = in.model.params;
      for (const auto& [li, beta] : np.beta) {
        Tensor& w = params.at(ModelGraph::key(li, "weight"));
        const Tensor& e = eta.at(li);
        std::size_t cs = prosub::channel_stride(w);
        for (int c = 0; c < w.shape[0]; ++c) {
          double b = beta.data[c] + ((li == layer && c == channel) ? shift : 0.0);
          for (std::size_t j = 0; j < cs; ++j) {
            std::size_t off = c * cs + j;
            w.data[off] = static_cast<float>(static_cast<double>(w.data[off]) +
                                             b * static_cast<double>(e.data[off]));
          }
        }
      }
      return refmath::ref_loss_from(in.model, params, in.images, in.labels);
    };

    // Perturbed-forward agreement between implementation and reference.
    double ref = loss_at(np.beta.begin()->first, 0, 0.0);
    REQUIRE(std::abs(loss - ref) <= 1e-4 * std::max(1.0, std::abs(ref)));

    for (const auto& [layer, bg] : beta_grads) {
      for (int c = 0; c < static_cast<int>(bg.data.size()); ++c) {
        double fd = (loss_at(layer, c, kFdStep) - loss_at(layer, c, -kFdStep)) / (2.0 * kFdStep);
        INFO("instance " << i << " layer " << layer << " beta[" << c << "]");
        REQUIRE(refmath::grad_close(bg.data[c], fd));
      }
    }
  }
}
