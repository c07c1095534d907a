#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "prosub/errors.hpp"

namespace prosub {

// Dense row-major float32 array with an optional gradient buffer of the same
// shape. The single value type shared by every module.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until ensure_grad()

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel(), 0.0f);
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? 0 : n;
  }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
  }

  float& at(std::size_t i) { return data[i]; }
  float at(std::size_t i) const { return data[i]; }
};

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

inline Tensor full_like(const Tensor& t, float v) {
  Tensor r(t.shape);
  std::fill(r.data.begin(), r.data.end(), v);
  return r;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// splitmix64; used to derive per-stage/per-purpose seeds from the global seed
// so that every stochastic choice is pinned by one number.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Salts for the independent random streams of a pipeline run.
namespace seed_salt {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kValSubset = 3;
inline constexpr std::uint64_t kNoise = 4;
inline constexpr std::uint64_t kSearch = 5;
inline constexpr std::uint64_t kFuse = 6;
inline constexpr std::uint64_t kPretrain = 7;
inline constexpr std::uint64_t kBench = 8;
inline constexpr std::uint64_t kAugment = 9;
}  // namespace seed_salt

inline void fill_uniform(Tensor& t, float lo, float hi, std::mt19937& rng) {
  std::uniform_real_distribution<float> dist(lo, hi);
  for (float& v : t.data) v = dist(rng);
}

inline void fill_normal(Tensor& t, float mean, float stddev, std::mt19937& rng) {
  std::normal_distribution<float> dist(mean, stddev);
  for (float& v : t.data) v = dist(rng);
}

}  // namespace prosub
