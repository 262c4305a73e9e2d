#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "frsp/tensor.hpp"

namespace frsp {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images stored as normalized float (C, H, W) planes, one label per image.
struct Dataset {
  Shape sample_shape;
  std::size_t classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return shape_numel(sample_shape); }

  /// (B, C, H, W) batch of the listed samples.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// First `n` samples (or a copy when n >= size()).
  Dataset head(std::size_t n) const;
  /// Samples at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

enum class DataFormat { Synthetic, Idx, CifarBinary };

struct DatasetSpec {
  DataFormat format = DataFormat::Synthetic;
  // idx: "images.idx,labels.idx"; cifar: comma-separated record files.
  std::string train_path;
  std::string test_path;
  std::uint64_t seed = 1;  // synthetic generator
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  Shape sample_shape{3, 16, 16};  // synthetic only
  std::size_t classes = 10;
  float noise = 0.6f;  // synthetic only
  std::vector<float> mean;  // per channel; empty means 0
  std::vector<float> stddev;  // per channel; empty means 1
  std::size_t crop_pad = 0;  // random crop with this zero padding
  bool flip = false;         // random horizontal flip
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Raw idx readers. Images with 3 dims load as one channel.
Dataset read_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes);
/// Concatenates the record files; images are 3x32x32.
Dataset load_cifar_binary(std::span<const std::string> paths, std::size_t classes = 10);

/// Deterministic class-conditional blob images; see data.cpp for the model.
/// Class templates depend on `seed` only, so splits drawn with different
/// `stream` values share them.
Dataset synth_dataset(std::uint64_t seed, std::uint64_t stream, std::size_t count,
                      const Shape& sample_shape, std::size_t classes, float noise);

/// x = (x - mean[c]) / stddev[c]. File loaders already scale bytes to [0, 1].
void normalize(Dataset& d, std::span<const float> mean, std::span<const float> stddev);

/// Loads both splits as described by `spec`, normalized. Truncates to the
/// configured sizes when the files hold more samples.
DataSplits load_dataset(const DatasetSpec& spec);

/// In-place random crop (zero padded) and horizontal flip on a batch.
void augment(Tensor& batch, std::size_t crop_pad, bool flip, std::mt19937_64& rng);

}  // namespace frsp
