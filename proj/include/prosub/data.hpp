#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/tensor.hpp"

namespace prosub {

// Labeled image set held fully in memory: images [N, C, H, W], one int label
// per image.
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  int count() const { return images.shape.empty() ? 0 : images.shape[0]; }
  int channels() const { return images.shape[1]; }
  int height() const { return images.shape[2]; }
  int width() const { return images.shape[3]; }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(channels()) * height() * width();
  }

  // Copies the given rows into a fresh batch tensor.
  std::pair<Tensor, std::vector<int>> gather(const std::vector<int>& indices) const {
    const std::size_t ss = sample_size();
    Tensor out({static_cast<int>(indices.size()), channels(), height(), width()});
    std::vector<int> lab(indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
      int idx = indices[j];
      if (idx < 0 || idx >= count())
        throw DataError("gather: index " + std::to_string(idx) + " out of range [0," +
                        std::to_string(count()) + ")");
      std::copy_n(images.data.data() + static_cast<std::size_t>(idx) * ss, ss,
                  out.data.data() + j * ss);
      lab[j] = labels[idx];
    }
    return {std::move(out), std::move(lab)};
  }
};

inline Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
  auto [images, labels] = ds.gather(indices);
  Dataset out;
  out.images = std::move(images);
  out.labels = std::move(labels);
  return out;
}

// Draws n distinct indices, seeded; the index list is returned so callers can
// persist it for reproducibility.
inline std::vector<int> draw_subset_indices(int population, int n, std::uint64_t seed) {
  if (n > population)
    throw DataError("subset of " + std::to_string(n) + " from population " +
                    std::to_string(population));
  std::vector<int> all(population);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(seed, seed_salt::kValSubset)));
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(n);
  return all;
}

// --- CIFAR-10 binary format -------------------------------------------------
// Each record is 3073 bytes: one label byte in [0,9], then 3072 pixel bytes
// laid out as 3 planes (red, green, blue) of 32x32 row-major values.

inline constexpr int kCifarRecordBytes = 3073;
inline constexpr int kCifarImageBytes = 3072;
inline constexpr int kCifarDim = 32;
inline constexpr int kCifarClasses = 10;

// Appends one batch file's records as raw [0,1]-scaled pixels.
inline void load_cifar_file(const std::string& path, std::vector<float>& pixels,
                            std::vector<int>& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    std::size_t offset = (bytes.size() / kCifarRecordBytes) * kCifarRecordBytes;
    throw FormatError(path + ": truncated record at offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " trailing bytes)");
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  pixels.reserve(pixels.size() + records * kCifarImageBytes);
  labels.reserve(labels.size() + records);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError(path + ": label " + std::to_string(int(rec[0])) + " out of range at record " +
                        std::to_string(r));
    labels.push_back(rec[0]);
    for (int j = 0; j < kCifarImageBytes; ++j)
      pixels.push_back(static_cast<float>(rec[1 + j]) / 255.0f);
  }
}

inline Dataset dataset_from_pixels(std::vector<float> pixels, std::vector<int> labels, int c,
                                   int h, int w) {
  Dataset ds;
  ds.images = Tensor({static_cast<int>(labels.size()), c, h, w});
  ds.images.data = std::move(pixels);
  ds.labels = std::move(labels);
  return ds;
}

// Standardizes both sets with per-channel mean/std computed on the reference
// (training) set.
inline void standardize_per_channel(Dataset& ref, Dataset* other = nullptr) {
  const int c = ref.channels();
  const std::size_t plane = static_cast<std::size_t>(ref.height()) * ref.width();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const double count = static_cast<double>(ref.count()) * plane;
  for (int ni = 0; ni < ref.count(); ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* p = ref.images.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      for (std::size_t j = 0; j < plane; ++j) mean[ci] += p[j];
    }
  for (int ci = 0; ci < c; ++ci) mean[ci] /= count;
  for (int ni = 0; ni < ref.count(); ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* p = ref.images.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        double d = p[j] - mean[ci];
        var[ci] += d * d;
      }
    }
  std::vector<float> inv(c);
  for (int ci = 0; ci < c; ++ci)
    inv[ci] = static_cast<float>(1.0 / std::sqrt(var[ci] / count + 1e-8));
  auto apply = [&](Dataset& ds) {
    for (int ni = 0; ni < ds.count(); ++ni)
      for (int ci = 0; ci < c; ++ci) {
        float* p = ds.images.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::size_t j = 0; j < plane; ++j)
          p[j] = (p[j] - static_cast<float>(mean[ci])) * inv[ci];
      }
  };
  apply(ref);
  if (other) apply(*other);
}

// Loads the standard binary batches (data_batch_1..5.bin + test_batch.bin)
// and standardizes with training-set statistics.
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<float> train_px, test_px;
  std::vector<int> train_lab, test_lab;
  bool any = false;
  for (int b = 1; b <= 5; ++b) {
    fs::path p = fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin");
    if (fs::exists(p)) {
      load_cifar_file(p.string(), train_px, train_lab);
      any = true;
    }
  }
  if (!any) throw DataError("no data_batch_*.bin files under " + dir);
  fs::path tp = fs::path(dir) / "test_batch.bin";
  if (!fs::exists(tp)) throw DataError("missing test_batch.bin under " + dir);
  load_cifar_file(tp.string(), test_px, test_lab);
  Dataset train = dataset_from_pixels(std::move(train_px), std::move(train_lab), 3, kCifarDim,
                                      kCifarDim);
  Dataset test =
      dataset_from_pixels(std::move(test_px), std::move(test_lab), 3, kCifarDim, kCifarDim);
  standardize_per_channel(train, &test);
  return {std::move(train), std::move(test)};
}

// --- Seeded synthetic generator ---------------------------------------------
// Gaussian blobs in pixel space: each class gets a fixed mean image drawn
// once, samples add unit noise. `separation` scales the class means, so
// larger values make the task easier.

struct SyntheticSpec {
  int classes = 4;
  int samples = 2000;  // training samples; test set is samples/4
  int dim = 8;         // square spatial size
  int channels = 3;
  float separation = 2.0f;
  std::uint64_t seed = 1;
};

inline std::pair<Dataset, Dataset> make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.samples < spec.classes || spec.dim < 1 || spec.channels < 1)
    throw ConfigError("synthetic spec: need >=2 classes, >=1 sample per class, positive dims");
  const std::size_t ss = static_cast<std::size_t>(spec.channels) * spec.dim * spec.dim;
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(spec.seed, seed_salt::kData)));
  std::normal_distribution<float> unit(0.0f, 1.0f);
  std::vector<float> means(static_cast<std::size_t>(spec.classes) * ss);
  for (auto& v : means) v = spec.separation * unit(rng);

  auto draw = [&](int n) {
    Dataset ds;
    ds.images = Tensor({n, spec.channels, spec.dim, spec.dim});
    ds.labels.resize(n);
    for (int i = 0; i < n; ++i) {
      int cls = i % spec.classes;  // balanced
      ds.labels[i] = cls;
      float* out = ds.images.data.data() + static_cast<std::size_t>(i) * ss;
      const float* mu = means.data() + static_cast<std::size_t>(cls) * ss;
      for (std::size_t j = 0; j < ss; ++j) out[j] = mu[j] + unit(rng);
    }
    return ds;
  };
  Dataset train = draw(spec.samples);
  Dataset test = draw(std::max(spec.classes, spec.samples / 4));
  return {std::move(train), std::move(test)};
}

// --- Batch streaming ---------------------------------------------------------

// Seeded shuffled pass over a dataset in fixed-size batches (final partial
// batch included). Optional augmentation applies a horizontal flip with
// probability 1/2 plus a +-2 pixel shift, per image, seeded.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, int batch_size, std::uint64_t seed, bool augment = false)
      : ds_(&ds),
        batch_size_(batch_size),
        augment_(augment),
        rng_(static_cast<std::uint32_t>(mix_seed(seed, seed_salt::kAugment))) {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    order_.resize(ds.count());
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937 shuffle_rng(static_cast<std::uint32_t>(seed));
    std::shuffle(order_.begin(), order_.end(), shuffle_rng);
  }

  bool next(Tensor& images, std::vector<int>& labels) {
    if (pos_ >= static_cast<int>(order_.size())) return false;
    int n = std::min(batch_size_, static_cast<int>(order_.size()) - pos_);
    std::vector<int> idx(order_.begin() + pos_, order_.begin() + pos_ + n);
    pos_ += n;
    auto batch = ds_->gather(idx);
    images = std::move(batch.first);
    labels = std::move(batch.second);
    if (augment_) apply_augment(images);
    return true;
  }

  void reset() { pos_ = 0; }
  int batches_per_pass() const {
    return (static_cast<int>(order_.size()) + batch_size_ - 1) / batch_size_;
  }

 private:
  void apply_augment(Tensor& images) {
    const int n = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3];
    std::uniform_int_distribution<int> flip(0, 1), shift(-2, 2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<float> tmp(plane);
    for (int ni = 0; ni < n; ++ni) {
      bool do_flip = flip(rng_) == 1;
      int dy = shift(rng_), dx = shift(rng_);
      for (int ci = 0; ci < c; ++ci) {
        float* p = images.data.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        std::fill(tmp.begin(), tmp.end(), 0.0f);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            int sy = y + dy, sx = x + dx;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            int tx = do_flip ? (w - 1 - x) : x;
            tmp[static_cast<std::size_t>(y) * w + tx] = p[static_cast<std::size_t>(sy) * w + sx];
          }
        std::copy(tmp.begin(), tmp.end(), p);
      }
    }
  }

  const Dataset* ds_;
  int batch_size_;
  bool augment_;
  std::vector<int> order_;
  int pos_ = 0;
  std::mt19937 rng_;
};

}  // namespace prosub
