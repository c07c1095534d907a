// Model construction, spec validation, forward semantics, and the seeded
// determinism contract of the graph engine.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "prosub/prosub.hpp"

namespace {

using prosub::LayerKind;
using prosub::LayerSpec;
using prosub::ModelGraph;
using prosub::Tensor;
using prosub::detail::conv;
using prosub::detail::linear;
using prosub::detail::plain;
using prosub::detail::res_add;

std::vector<LayerSpec> tiny_convnet(int classes) {
  return {conv(3, 4, 3, 1, true), plain(LayerKind::BatchNorm2d, 4), plain(LayerKind::Relu, 4),
          plain(LayerKind::AvgPool2d, 4), plain(LayerKind::Flatten, 4),
          linear(4, classes, false)};
}

Tensor random_images(std::vector<int> shape, std::uint32_t seed) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  prosub::fill_normal(t, 0.0f, 1.0f, rng);
  return t;
}

}  // namespace

TEST_CASE("spec validation rejects malformed graphs", "[graph]") {
  SECTION("empty layer list") {
    REQUIRE_THROWS_AS(prosub::build_model({}, 10, 1), prosub::ConfigError);
  }
  SECTION("channel mismatch names both layer indices") {
    std::vector<LayerSpec> spec = {conv(3, 4, 3, 1, true), plain(LayerKind::Relu, 8)};
    try {
      prosub::build_model(spec, 8, 1);
      FAIL("expected ConfigError");
    } catch (const prosub::ConfigError& e) {
      std::string msg = e.what();
      REQUIRE(msg.find("0") != std::string::npos);
      REQUIRE(msg.find("1") != std::string::npos);
      REQUIRE(msg.find("4") != std::string::npos);
      REQUIRE(msg.find("8") != std::string::npos);
    }
  }
  SECTION("residual-add must reference an earlier producer") {
    std::vector<LayerSpec> spec = {conv(3, 4, 3, 1, true), plain(LayerKind::Relu, 4),
                                   res_add(4, 5), linear(4, 4, false)};
    REQUIRE_THROWS_AS(prosub::build_model(spec, 4, 1), prosub::ConfigError);
  }
  SECTION("residual-add producers must have equal channel counts") {
    std::vector<LayerSpec> spec = {conv(3, 4, 3, 1, true), plain(LayerKind::Relu, 4),
                                   conv(4, 8, 3, 1, true), res_add(8, 1),
                                   linear(8, 4, false)};
    REQUIRE_THROWS_AS(prosub::build_model(spec, 4, 1), prosub::ConfigError);
  }
  SECTION("final layer width must equal num_classes") {
    REQUIRE_THROWS_AS(prosub::build_model(tiny_convnet(4), 10, 1), prosub::ConfigError);
  }
  SECTION("only conv/linear may be prunable") {
    LayerSpec bad = plain(LayerKind::Relu, 4);
    bad.prunable = true;
    std::vector<LayerSpec> spec = {conv(3, 4, 3, 1, true), bad, plain(LayerKind::AvgPool2d, 4),
                                   plain(LayerKind::Flatten, 4), linear(4, 2, false)};
    REQUIRE_THROWS_AS(prosub::build_model(spec, 2, 1), prosub::ConfigError);
  }
}

TEST_CASE("initialization is deterministic under the seed", "[graph]") {
  ModelGraph a = prosub::build_model(tiny_convnet(4), 4, 7);
  ModelGraph b = prosub::build_model(tiny_convnet(4), 4, 7);
  ModelGraph c = prosub::build_model(tiny_convnet(4), 4, 8);
  REQUIRE(a.params.at("layer0.weight").data == b.params.at("layer0.weight").data);
  REQUIRE(a.params.at("layer5.weight").data == b.params.at("layer5.weight").data);
  REQUIRE(a.params.at("layer0.weight").data != c.params.at("layer0.weight").data);

  // Fan-in scaled uniform bound, zero biases, identity batch-norm affine.
  float bound = std::sqrt(6.0f / (3 * 3 * 3));
  for (float w : a.params.at("layer0.weight").data) {
    REQUIRE(w >= -bound);
    REQUIRE(w <= bound);
  }
  for (float v : a.params.at("layer0.bias").data) REQUIRE(v == 0.0f);
  for (float v : a.params.at("layer1.gamma").data) REQUIRE(v == 1.0f);
  for (float v : a.params.at("layer1.beta").data) REQUIRE(v == 0.0f);
  for (float v : a.params.at("layer1.running_var").data) REQUIRE(v == 1.0f);
}

TEST_CASE("forward produces the expected shapes", "[graph]") {
  SECTION("strided conv with same padding") {
    std::vector<LayerSpec> spec = {conv(3, 5, 3, 2, true), plain(LayerKind::Flatten, 5),
                                   linear(5 * 4 * 4, 2, false)};
    ModelGraph m = prosub::build_model(spec, 2, 1);
    Tensor x = random_images({2, 3, 8, 8}, 11);
    Tensor y = prosub::forward_eval(m, x);
    REQUIRE(y.shape == std::vector<int>{2, 2});
    // conv output is 4x4: (8 + 2*1 - 3)/2 + 1.
    REQUIRE(prosub::detail::conv_out_dim(8, 3, 2) == 4);
    REQUIRE(prosub::infer_output_shape(m, {2, 3, 8, 8}) == y.shape);
  }
  SECTION("pool collapses spatial dims and flatten feeds the classifier") {
    ModelGraph m = prosub::build_model(tiny_convnet(4), 4, 1);
    Tensor x = random_images({3, 3, 6, 6}, 12);
    Tensor y = prosub::forward_eval(m, x);
    REQUIRE(y.shape == std::vector<int>{3, 4});
    REQUIRE(prosub::infer_output_shape(m, {3, 3, 6, 6}) == y.shape);
  }
}

TEST_CASE("residual add sums the skip producer's activation", "[graph]") {
  // Identity-conv trick: 1x1 kernels with weight 1 pass channels through, so
  // the add must exactly double the activation.
  std::vector<LayerSpec> spec = {conv(1, 1, 1, 1, true), conv(1, 1, 1, 1, true), res_add(1, 0),
                                 plain(LayerKind::Flatten, 1), linear(4, 2, false)};
  ModelGraph m = prosub::build_model(spec, 2, 1);
  m.param(0, "weight").data = {1.0f};
  m.param(1, "weight").data = {1.0f};
  // Read the sum off the logits with an identity-ish linear head.
  Tensor x = random_images({1, 1, 2, 2}, 13);
  prosub::Workspace ws;
  prosub::ForwardOptions fo;
  prosub::forward(m, x, fo, &ws);
  for (std::size_t j = 0; j < x.data.size(); ++j)
    REQUIRE(ws.act[2].data[j] == 2.0f * x.data[j]);
}

TEST_CASE("batch norm follows train/eval semantics", "[graph]") {
  std::vector<LayerSpec> spec = {conv(2, 3, 1, 1, true), plain(LayerKind::BatchNorm2d, 3),
                                 plain(LayerKind::AvgPool2d, 3), plain(LayerKind::Flatten, 3),
                                 linear(3, 2, false)};
  ModelGraph m = prosub::build_model(spec, 2, 5);
  Tensor x = random_images({4, 2, 3, 3}, 21);

  SECTION("training mode normalizes with biased batch statistics") {
    prosub::Workspace ws;
    prosub::ForwardOptions fo;
    fo.training = true;
    fo.update_running = false;
    prosub::forward(m, x, fo, &ws);
    const Tensor& bn = ws.act[1];
    // gamma=1, beta=0: per-channel mean ~0, biased variance ~1.
    const int c = 3, plane = 9, n = 4;
    for (int ci = 0; ci < c; ++ci) {
      double mean = 0.0, var = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int j = 0; j < plane; ++j)
          mean += bn.data[(static_cast<std::size_t>(ni) * c + ci) * plane + j];
      mean /= n * plane;
      for (int ni = 0; ni < n; ++ni)
        for (int j = 0; j < plane; ++j) {
          double d = bn.data[(static_cast<std::size_t>(ni) * c + ci) * plane + j] - mean;
          var += d * d;
        }
      var /= n * plane;
      REQUIRE(std::abs(mean) < 1e-5);
      REQUIRE(std::abs(var - 1.0) < 1e-3);
    }
  }

  SECTION("running statistics update with momentum and unbiased variance") {
    // Compute the batch stats of the BN input by hand.
    prosub::Workspace pre;
    prosub::ForwardOptions eval_opt;
    prosub::forward(m, x, eval_opt, &pre);
    const Tensor& z = pre.act[0];
    const int c = 3, plane = 9, n = 4;
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (int ci = 0; ci < c; ++ci) {
      for (int ni = 0; ni < n; ++ni)
        for (int j = 0; j < plane; ++j)
          mean[ci] += z.data[(static_cast<std::size_t>(ni) * c + ci) * plane + j];
      mean[ci] /= n * plane;
      for (int ni = 0; ni < n; ++ni)
        for (int j = 0; j < plane; ++j) {
          double d = z.data[(static_cast<std::size_t>(ni) * c + ci) * plane + j] - mean[ci];
          var[ci] += d * d;
        }
      var[ci] /= n * plane - 1;  // unbiased estimate goes into the running buffer
    }

    prosub::Workspace ws;
    prosub::ForwardOptions fo;
    fo.training = true;
    prosub::forward(m, x, fo, &ws);
    const Tensor& rm = m.param(1, "running_mean");
    const Tensor& rv = m.param(1, "running_var");
    for (int ci = 0; ci < c; ++ci) {
      REQUIRE(std::abs(rm.data[ci] - prosub::kBnMomentum * mean[ci]) < 1e-5);
      double expect = (1.0 - prosub::kBnMomentum) * 1.0 + prosub::kBnMomentum * var[ci];
      REQUIRE(std::abs(rv.data[ci] - expect) < 1e-5);
    }
  }

  SECTION("eval mode normalizes with the running statistics") {
    Tensor& rm = m.param(1, "running_mean");
    Tensor& rv = m.param(1, "running_var");
    rm.data = {0.5f, -0.25f, 1.0f};
    rv.data = {2.0f, 0.5f, 1.5f};
    prosub::Workspace pre;
    prosub::ForwardOptions eval_opt;
    prosub::forward(m, x, eval_opt, &pre);
    const Tensor& z = pre.act[0];
    const Tensor& bn = pre.act[1];
    const int c = 3, plane = 9;
    for (std::size_t ni = 0; ni < 4; ++ni)
      for (int ci = 0; ci < c; ++ci)
        for (int j = 0; j < plane; ++j) {
          std::size_t off = (ni * c + ci) * plane + j;
          float expect = (z.data[off] - rm.data[ci]) /
                         std::sqrt(rv.data[ci] + prosub::kBnEps);
          REQUIRE(bn.data[off] == Catch::Approx(expect).margin(1e-5));
        }
  }
}

TEST_CASE("eval forward never mutates the model", "[graph]") {
  ModelGraph m = prosub::build_model(tiny_convnet(4), 4, 3);
  std::map<std::string, std::vector<float>> before;
  for (const auto& [name, t] : m.params) before[name] = t.data;
  Tensor x = random_images({2, 3, 5, 5}, 31);
  prosub::forward_eval(m, x);
  prosub::forward_eval(m, x);
  for (const auto& [name, t] : m.params) REQUIRE(before.at(name) == t.data);
}

TEST_CASE("channel source walks past pass-through layers", "[graph]") {
  ModelGraph m = prosub::build_model(tiny_convnet(4), 4, 1);
  REQUIRE(prosub::channel_source(m, 4) == 0);   // flatten -> conv0
  REQUIRE(prosub::input_source(m, 5) == 0);     // linear consumes conv0's channels
  REQUIRE(prosub::input_source(m, 0) == -1);    // network input
}

TEST_CASE("cross entropy validates its labels", "[graph]") {
  Tensor logits({2, 3});
  logits.data = {0.1f, 0.2f, 0.3f, 0.0f, 0.0f, 0.0f};
  REQUIRE_THROWS_AS(prosub::cross_entropy(logits, {0, 3}), prosub::DataError);
  REQUIRE_THROWS_AS(prosub::cross_entropy(logits, {0}), prosub::DataError);
}

TEST_CASE("seed mixing separates the per-purpose streams", "[graph]") {
  std::uint64_t s = 42;
  REQUIRE(prosub::mix_seed(s, prosub::seed_salt::kInit) !=
          prosub::mix_seed(s, prosub::seed_salt::kData));
  REQUIRE(prosub::mix_seed(s, prosub::seed_salt::kInit) !=
          prosub::mix_seed(s + 1, prosub::seed_salt::kInit));
}
