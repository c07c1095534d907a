// Sub-network configs: uniform multipliers, structural slicing, tie sets,
// cost accounting, nesting, and the scatter-back paths.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "prosub/prosub.hpp"

namespace {

using prosub::LayerKind;
using prosub::LayerSpec;
using prosub::ModelGraph;
using prosub::SubnetConfig;
using prosub::Tensor;
using prosub::detail::conv;
using prosub::detail::linear;
using prosub::detail::plain;

ModelGraph conv_chain(int width, std::uint64_t seed) {
  std::vector<LayerSpec> spec = {
      conv(2, width, 3, 1, true),     plain(LayerKind::BatchNorm2d, width),
      plain(LayerKind::Relu, width),  conv(width, width, 3, 1, true),
      plain(LayerKind::Relu, width),  plain(LayerKind::AvgPool2d, width),
      plain(LayerKind::Flatten, width), linear(width, 3, false),
  };
  ModelGraph m = prosub::build_model(spec, 3, seed);
  m.input_hw = 6;
  return m;
}

Tensor random_images(std::vector<int> shape, std::uint32_t seed) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  prosub::fill_normal(t, 0.0f, 1.0f, rng);
  return t;
}

SubnetConfig retain_at(int layer, std::vector<int> channels) {
  SubnetConfig cfg;
  cfg.retained[layer] = std::move(channels);
  return cfg;
}

}  // namespace

TEST_CASE("uniform multipliers round half-up with a one-channel floor", "[subnet]") {
  ModelGraph m8 = conv_chain(8, 1);
  SECTION("quarter width of 8 keeps two channels") {
    SubnetConfig cfg = prosub::uniform_config(m8, 0.25);
    REQUIRE(cfg.retained.at(0) == std::vector<int>{0, 1});
    REQUIRE(cfg.retained.at(3) == std::vector<int>{0, 1});
  }
  SECTION("0.75 of 10 rounds 7.5 up to 8") {
    ModelGraph m10 = conv_chain(10, 1);
    SubnetConfig cfg = prosub::uniform_config(m10, 0.75);
    REQUIRE(cfg.retained.at(0).size() == 8);
  }
  SECTION("full multiplier is the identity config") {
    SubnetConfig cfg = prosub::uniform_config(m8, 1.0);
    REQUIRE(cfg.retained.at(0).size() == 8);
    REQUIRE(prosub::config_subset(prosub::full_config(m8), cfg));
  }
  SECTION("tiny multipliers never empty a layer") {
    SubnetConfig cfg = prosub::uniform_config(m8, 0.01);
    REQUIRE(cfg.retained.at(0) == std::vector<int>{0});
  }
  SECTION("out-of-range multipliers are rejected") {
    REQUIRE_THROWS_AS(prosub::uniform_config(m8, 0.0), prosub::ConfigError);
    REQUIRE_THROWS_AS(prosub::uniform_config(m8, 1.5), prosub::ConfigError);
  }
  SECTION("ascending multipliers are nested") {
    std::vector<SubnetConfig> pool;  // largest first
    for (double mult : {1.0, 0.75, 0.5, 0.25}) pool.push_back(prosub::uniform_config(m8, mult));
    REQUIRE(prosub::check_nesting(pool));
  }
}

TEST_CASE("the full config reproduces the model bit-exactly", "[subnet]") {
  for (std::uint64_t seed : {1, 2}) {
    ModelGraph m = prosub::build_from_arch(prosub::resnet8(4, 8), seed);
    ModelGraph sliced = prosub::apply_config(m, prosub::full_config(m));
    Tensor x = random_images({2, 3, 8, 8}, 50);
    Tensor a = prosub::forward_eval(m, x);
    Tensor b = prosub::forward_eval(sliced, x);
    REQUIRE(a.data == b.data);
  }
}

TEST_CASE("slicing restricts producer outputs and consumer inputs together", "[subnet]") {
  // conv(3->8) feeding conv(8->16): retaining 4 outputs of the first conv
  // must shrink the second conv's weight to (16, 4, k, k).
  std::vector<LayerSpec> spec = {
      conv(3, 8, 3, 1, true),        plain(LayerKind::BatchNorm2d, 8),
      plain(LayerKind::Relu, 8),     conv(8, 16, 3, 1, true),
      plain(LayerKind::AvgPool2d, 16), plain(LayerKind::Flatten, 16),
      linear(16, 4, false),
  };
  ModelGraph m = prosub::build_model(spec, 4, 3);
  SubnetConfig cfg = retain_at(0, {0, 2, 5, 7});
  ModelGraph s = prosub::apply_config(m, cfg);

  REQUIRE(s.param(0, "weight").shape == std::vector<int>{4, 3, 3, 3});
  REQUIRE(s.param(0, "bias").shape == std::vector<int>{4});
  REQUIRE(s.param(1, "gamma").shape == std::vector<int>{4});
  REQUIRE(s.param(3, "weight").shape == std::vector<int>{16, 4, 3, 3});

  // The sliced blocks are the retained rows/columns of the originals.
  const Tensor& w0 = m.param(0, "weight");
  const Tensor& s0 = s.param(0, "weight");
  const std::size_t cs = 3 * 3 * 3;
  std::vector<int> kept = {0, 2, 5, 7};
  for (int o = 0; o < 4; ++o)
    for (std::size_t j = 0; j < cs; ++j)
      REQUIRE(s0.data[o * cs + j] == w0.data[kept[o] * cs + j]);
  for (int o = 0; o < 4; ++o)
    REQUIRE(s.param(0, "bias").data[o] == m.param(0, "bias").data[kept[o]]);

  // Consumer inputs: column c of the sliced conv3 weight is original column kept[c].
  const Tensor& w3 = m.param(3, "weight");
  const Tensor& s3 = s.param(3, "weight");
  for (int o = 0; o < 16; ++o)
    for (int c = 0; c < 4; ++c)
      for (int kk = 0; kk < 9; ++kk)
        REQUIRE(s3.data[(o * 4 + c) * 9 + kk] == w3.data[(o * 8 + kept[c]) * 9 + kk]);
}

TEST_CASE("linear consumers slice flattened inputs in per-channel blocks", "[subnet]") {
  // conv output 4x4 spatial, 4 channels -> flatten -> linear sees 64 features
  // in 16-wide channel blocks.
  std::vector<LayerSpec> spec = {conv(2, 4, 3, 1, true), plain(LayerKind::Relu, 4),
                                 plain(LayerKind::Flatten, 4), linear(64, 3, false)};
  ModelGraph m = prosub::build_model(spec, 3, 7);
  m.input_hw = 4;
  SubnetConfig cfg = retain_at(0, {1, 3});
  ModelGraph s = prosub::apply_config(m, cfg);
  REQUIRE(s.param(3, "weight").shape == std::vector<int>{3, 32});
  const Tensor& w = m.param(3, "weight");
  const Tensor& sw = s.param(3, "weight");
  for (int o = 0; o < 3; ++o)
    for (int b = 0; b < 16; ++b) {
      REQUIRE(sw.data[o * 32 + b] == w.data[o * 64 + 16 + b]);        // channel 1's block
      REQUIRE(sw.data[o * 32 + 16 + b] == w.data[o * 64 + 48 + b]);   // channel 3's block
    }

  // Sliced forward equals the full model fed with the other channels zeroed.
  Tensor x = random_images({2, 2, 4, 4}, 60);
  ModelGraph masked = m;
  Tensor& mw = masked.param(0, "weight");
  Tensor& mb = masked.param(0, "bias");
  const std::size_t ccs = 2 * 3 * 3;
  for (int dead : {0, 2}) {
    std::fill(mw.data.begin() + dead * ccs, mw.data.begin() + (dead + 1) * ccs, 0.0f);
    mb.data[dead] = 0.0f;
  }
  Tensor a = prosub::forward_eval(s, x);
  Tensor b = prosub::forward_eval(masked, x);
  for (std::size_t j = 0; j < a.data.size(); ++j)
    REQUIRE(a.data[j] == Catch::Approx(b.data[j]).margin(1e-5));
}

TEST_CASE("tie sets force identical retained sets across residual producers", "[subnet]") {
  ModelGraph m = prosub::build_from_arch(prosub::resnet8(4, 8), 5);
  auto ties = prosub::compute_tie_sets(m);
  // The stem and both block convs feed residual adds, forming one set.
  bool found = false;
  for (const auto& [id, members] : ties) {
    (void)id;
    if (members == std::vector<int>{0, 3, 7}) found = true;
  }
  REQUIRE(found);

  SECTION("mismatched sets name the tie group") {
    SubnetConfig bad;
    bad.retained[0] = {0, 2};
    bad.retained[3] = {0, 1};
    bad.retained[7] = {0, 2};
    try {
      prosub::apply_config(m, bad);
      FAIL("expected ConfigError");
    } catch (const prosub::ConfigError& e) {
      std::string msg = e.what();
      REQUIRE(msg.find("tie set") != std::string::npos);
    }
  }

  SECTION("matching sets slice the whole chain coherently") {
    SubnetConfig good;
    good.retained[0] = {0, 3, 5};
    good.retained[3] = {0, 3, 5};
    good.retained[7] = {0, 3, 5};
    ModelGraph s = prosub::apply_config(m, good);
    Tensor x = random_images({2, 3, 8, 8}, 61);
    Tensor y = prosub::forward_eval(s, x);  // residual adds line up
    REQUIRE(y.shape == std::vector<int>{2, 4});
  }

  SECTION("explicit tie tags are honored") {
    std::vector<LayerSpec> spec = {conv(2, 4, 3, 1, true), plain(LayerKind::Relu, 4),
                                   conv(4, 4, 3, 1, true), plain(LayerKind::AvgPool2d, 4),
                                   plain(LayerKind::Flatten, 4), linear(4, 2, false)};
    spec[0].tie_group = "width";
    spec[2].tie_group = "width";
    ModelGraph tagged = prosub::build_model(spec, 2, 6);
    auto tagged_ties = prosub::compute_tie_sets(tagged);
    REQUIRE(tagged_ties.count("width") == 1);
    REQUIRE(tagged_ties.at("width") == std::vector<int>{0, 2});
    SubnetConfig bad;
    bad.retained[0] = {0, 1};
    bad.retained[2] = {0, 2};
    REQUIRE_THROWS_WITH(prosub::apply_config(tagged, bad),
                        Catch::Matchers::ContainsSubstring("width"));
  }
}

TEST_CASE("cost accounting follows the direct formulas", "[subnet]") {
  SECTION("a 3->8 conv at 32x32 with a light head") {
    std::vector<LayerSpec> spec = {conv(3, 8, 3, 1, true), plain(LayerKind::AvgPool2d, 8),
                                   plain(LayerKind::Flatten, 8), linear(8, 2, false)};
    ModelGraph m = prosub::build_model(spec, 2, 1);
    m.input_hw = 32;
    prosub::CostReport full = prosub::cost_of(m, prosub::full_config(m));
    // conv: 2*3*8*9*32*32 = 442,368 flops and 3*8*9 + 8 = 224 params;
    // linear head adds 2*8*2 = 32 flops and 8*2 + 2 = 18 params.
    REQUIRE(full.flops == 442368 + 32);
    REQUIRE(full.params == 224 + 18);
    REQUIRE(full.size_ratio == 1.0);
  }
  SECTION("half width on a conv-dominated chain costs about a quarter") {
    std::vector<LayerSpec> spec = {
        conv(2, 16, 3, 1, true),  plain(LayerKind::Relu, 16), conv(16, 16, 3, 1, true),
        plain(LayerKind::Relu, 16), conv(16, 16, 3, 1, true), plain(LayerKind::Relu, 16),
        conv(16, 16, 3, 1, true), plain(LayerKind::AvgPool2d, 16),
        plain(LayerKind::Flatten, 16), linear(16, 2, false)};
    ModelGraph m = prosub::build_model(spec, 2, 1);
    m.input_hw = 8;
    prosub::CostReport full = prosub::cost_of(m, prosub::full_config(m));
    prosub::CostReport half = prosub::cost_of(m, prosub::uniform_config(m, 0.5));
    double ratio = static_cast<double>(half.flops) / full.flops;
    REQUIRE(ratio == Catch::Approx(0.25).margin(0.02));
  }
  SECTION("costs are monotone under config inclusion") {
    ModelGraph m = conv_chain(8, 2);
    prosub::CostReport big = prosub::cost_of(m, prosub::uniform_config(m, 0.75));
    prosub::CostReport small = prosub::cost_of(m, prosub::uniform_config(m, 0.5));
    REQUIRE(small.flops <= big.flops);
    REQUIRE(small.params <= big.params);
    REQUIRE(small.size_ratio < big.size_ratio);
  }
}

TEST_CASE("nesting checks pairwise inclusion", "[subnet]") {
  SubnetConfig a = retain_at(0, {0, 1, 2});
  SubnetConfig b = retain_at(0, {0, 1});
  SubnetConfig c = retain_at(0, {0, 2});
  REQUIRE(prosub::check_nesting({a, b}));
  REQUIRE_FALSE(prosub::check_nesting({b, c}));
  REQUIRE(prosub::check_nesting({}));
  REQUIRE(prosub::check_nesting({a}));
}

TEST_CASE("slicing composes along nested configs", "[subnet]") {
  ModelGraph m = conv_chain(8, 4);
  SubnetConfig outer;
  outer.retained[0] = {0, 2, 4, 6};
  outer.retained[3] = {0, 2, 4, 6};
  SubnetConfig inner;           // subset of outer, in original channel ids
  inner.retained[0] = {0, 4};
  inner.retained[3] = {0, 4};
  SubnetConfig inner_relative;  // the same channels named by their position in outer
  inner_relative.retained[0] = {0, 2};
  inner_relative.retained[3] = {0, 2};

  ModelGraph once = prosub::apply_config(m, inner);
  ModelGraph twice = prosub::apply_config(prosub::apply_config(m, outer), inner_relative);
  for (const auto& [name, t] : once.params) REQUIRE(twice.params.at(name).data == t.data);
}

TEST_CASE("config validation rejects malformed retained sets", "[subnet]") {
  ModelGraph m = conv_chain(8, 1);
  SECTION("empty set") {
    REQUIRE_THROWS_AS(prosub::validate_config(m, retain_at(0, {})), prosub::ConfigError);
  }
  SECTION("channel out of range") {
    REQUIRE_THROWS_AS(prosub::validate_config(m, retain_at(0, {0, 8})), prosub::ConfigError);
  }
  SECTION("not strictly ascending") {
    REQUIRE_THROWS_AS(prosub::validate_config(m, retain_at(0, {1, 1})), prosub::ConfigError);
    REQUIRE_THROWS_AS(prosub::validate_config(m, retain_at(0, {2, 1})), prosub::ConfigError);
  }
  SECTION("non-prunable layer") {
    REQUIRE_THROWS_AS(prosub::validate_config(m, retain_at(7, {0})), prosub::ConfigError);
  }
}

TEST_CASE("scatter writes sliced values back into retained positions only", "[subnet]") {
  ModelGraph m = conv_chain(8, 6);
  SubnetConfig cfg;
  cfg.retained[0] = {1, 5};
  cfg.retained[3] = {1, 5};
  ModelGraph s = prosub::apply_config(m, cfg);
  std::vector<float> before = m.param(0, "weight").data;

  for (auto& v : s.param(0, "weight").data) v += 1.0f;
  ModelGraph full_copy = m;
  prosub::scatter_params(full_copy, s, cfg);

  const std::size_t cs = 2 * 3 * 3;
  const Tensor& after = full_copy.param(0, "weight");
  for (int o = 0; o < 8; ++o)
    for (std::size_t j = 0; j < cs; ++j) {
      float expect = (o == 1 || o == 5) ? before[o * cs + j] + 1.0f : before[o * cs + j];
      REQUIRE(after.data[o * cs + j] == expect);
    }
}

TEST_CASE("gradient scatter accumulates under a touch mask", "[subnet]") {
  ModelGraph m = conv_chain(8, 6);
  SubnetConfig cfg;
  cfg.retained[0] = {1, 5};
  cfg.retained[3] = {1, 5};
  prosub::SliceMap map = prosub::build_slice_map(m, prosub::normalize_config(m, cfg));
  ModelGraph s = prosub::apply_config(m, cfg);

  s.zero_grads();
  for (auto& g : s.param(0, "weight").grad) g = 2.0f;
  m.zero_grads();
  std::map<std::string, std::vector<char>> touched;
  prosub::scatter_add_grads(m, s, map, touched);
  prosub::scatter_add_grads(m, s, map, touched);  // accumulation, not overwrite

  const std::size_t cs = 2 * 3 * 3;
  const Tensor& g = m.param(0, "weight");
  const std::vector<char>& mask = touched.at("layer0.weight");
  for (int o = 0; o < 8; ++o)
    for (std::size_t j = 0; j < cs; ++j) {
      bool kept = (o == 1 || o == 5);
      REQUIRE(g.grad[o * cs + j] == (kept ? 4.0f : 0.0f));
      REQUIRE(mask[o * cs + j] == (kept ? 1 : 0));
    }
}
