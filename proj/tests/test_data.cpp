#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "frsp/data.hpp"

using namespace frsp;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("frsp_data_" + std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_file(const std::vector<std::uint32_t>& dims,
                                    const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> b{0, 0, 0x08, static_cast<unsigned char>(dims.size())};
  for (std::uint32_t d : dims) put_be32(b, d);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

}  // namespace

TEST(Data, IdxRoundTrip) {
  TempDir dir;
  std::vector<unsigned char> px(3 * 2 * 2);
  std::iota(px.begin(), px.end(), 0);
  write_bytes(dir.file("img"), idx_file({3, 2, 2}, px));
  write_bytes(dir.file("lab"), idx_file({3}, {2, 0, 1}));
  const Dataset d = read_idx(dir.file("img"), dir.file("lab"), 3);
  EXPECT_EQ(d.sample_shape, (Shape{1, 2, 2}));
  EXPECT_EQ(d.labels, (std::vector<int>{2, 0, 1}));
  EXPECT_EQ(d.pixels[5], 5.0f);

  DatasetSpec spec;
  spec.format = DataFormat::Idx;
  spec.classes = 3;
  spec.train_path = dir.file("img") + "," + dir.file("lab");
  spec.test_path = spec.train_path;
  spec.train_size = 2;
  spec.test_size = 0;
  const DataSplits s = load_dataset(spec);
  EXPECT_EQ(s.train.size(), 2u);
  EXPECT_EQ(s.test.size(), 3u);
  EXPECT_NEAR(s.test.pixels[11], 11.0 / 255.0, 1e-7);
}

TEST(Data, IdxErrors) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_file({2, 2, 2}, std::vector<unsigned char>(8)));
  write_bytes(dir.file("short"), idx_file({2, 2, 2}, std::vector<unsigned char>(7)));
  write_bytes(dir.file("lab3"), idx_file({3}, {0, 1, 0}));
  write_bytes(dir.file("lab_bad"), idx_file({2}, {0, 9}));
  std::vector<unsigned char> magic = idx_file({2}, {0, 1});
  magic[2] = 0x0d;
  write_bytes(dir.file("magic"), magic);
  EXPECT_THROW(read_idx(dir.file("short"), dir.file("lab3"), 2), DataError);
  EXPECT_THROW(read_idx(dir.file("img"), dir.file("lab3"), 2), DataError);
  EXPECT_THROW(read_idx(dir.file("img"), dir.file("lab_bad"), 2), DataError);
  EXPECT_THROW(read_idx(dir.file("img"), dir.file("magic"), 2), DataError);
  EXPECT_THROW(read_idx(dir.file("nope"), dir.file("lab3"), 2), DataError);
}

TEST(Data, CifarRecords) {
  TempDir dir;
  std::vector<unsigned char> rec;
  for (int r = 0; r < 2; ++r) {
    rec.push_back(static_cast<unsigned char>(r * 7));
    for (int i = 0; i < 3072; ++i) rec.push_back(static_cast<unsigned char>((i + r) % 256));
  }
  write_bytes(dir.file("a.bin"), rec);
  write_bytes(dir.file("b.bin"), std::vector<unsigned char>(rec.begin(), rec.begin() + 3073));
  const std::string paths[] = {dir.file("a.bin"), dir.file("b.bin")};
  const Dataset d = load_cifar_binary(paths);
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 7, 0}));
  EXPECT_EQ(d.pixels[3072 + 1], 2.0f);
  write_bytes(dir.file("bad.bin"), std::vector<unsigned char>(3072));
  const std::string bad[] = {dir.file("bad.bin")};
  EXPECT_THROW(load_cifar_binary(bad), DataError);
}

TEST(Data, SyntheticIsDeterministicAndBalanced) {
  const Dataset a = synth_dataset(7, 0, 200, {3, 16, 16}, 10, 0.6f);
  const Dataset b = synth_dataset(7, 0, 200, {3, 16, 16}, 10, 0.6f);
  const Dataset test = synth_dataset(7, 1, 200, {3, 16, 16}, 10, 0.6f);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, test.pixels);
  std::vector<int> count(10, 0);
  for (int y : a.labels) ++count[std::size_t(y)];
  for (int c : count) EXPECT_EQ(c, 20);
  for (float v : a.pixels) ASSERT_TRUE(std::isfinite(v));
}

// The per-class templates are the signal: a nearest-class-mean classifier
// fit on the train stream must transfer to the test stream.
TEST(Data, SyntheticClassesAreSeparable) {
  const Dataset train = synth_dataset(7, 0, 1000, {3, 16, 16}, 10, 0.6f);
  const Dataset test = synth_dataset(7, 1, 300, {3, 16, 16}, 10, 0.6f);
  const std::size_t n = train.sample_size();
  std::vector<double> mean(10 * n, 0.0);
  std::vector<int> count(10, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto y = std::size_t(train.labels[i]);
    ++count[y];
    for (std::size_t j = 0; j < n; ++j) mean[y * n + j] += train.pixels[i * n + j];
  }
  for (std::size_t y = 0; y < 10; ++y)
    for (std::size_t j = 0; j < n; ++j) mean[y * n + j] /= count[y];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t y = 0; y < 10; ++y) {
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j) d += std::pow(test.pixels[i * n + j] - mean[y * n + j], 2);
      if (d < best) {
        best = d;
        arg = y;
      }
    }
    correct += arg == std::size_t(test.labels[i]);
  }
  EXPECT_GT(double(correct) / double(test.size()), 0.3);
}

TEST(Data, NormalizePerChannel) {
  Dataset d;
  d.sample_shape = {2, 1, 2};
  d.classes = 1;
  d.pixels = {1, 3, 5, 7};
  d.labels = {0};
  const float mean[] = {1, 5}, sd[] = {2, 0.5};
  normalize(d, mean, sd);
  EXPECT_EQ(d.pixels, (std::vector<float>{0, 1, 0, 4}));
  const float wrong[] = {1};
  EXPECT_THROW(normalize(d, wrong, wrong), DataError);
}

TEST(Data, BatchHeadSubset) {
  const Dataset d = synth_dataset(1, 0, 10, {1, 4, 4}, 2, 0.1f);
  const std::size_t idx[] = {3, 1};
  const Tensor b = d.batch(idx);
  EXPECT_EQ(b.shape(), (Shape{2, 1, 4, 4}));
  EXPECT_EQ(b[16], d.pixels[16]);
  EXPECT_EQ(d.batch_labels(idx), (std::vector<int>{d.labels[3], d.labels[1]}));
  EXPECT_EQ(d.head(4).size(), 4u);
  EXPECT_EQ(d.subset(idx).labels[0], d.labels[3]);
  const std::size_t bad[] = {10};
  EXPECT_THROW(d.batch(bad), std::out_of_range);
}

TEST(Data, AugmentCropAndFlip) {
  Tensor t = Tensor::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  std::mt19937_64 rng(1);
  Tensor flipped = t;
  // With flip only, each image is either unchanged or mirrored.
  for (int i = 0; i < 10; ++i) {
    Tensor x = t;
    augment(x, 0, true, rng);
    EXPECT_TRUE(x == t || x == Tensor::from({1, 1, 2, 3}, {3, 2, 1, 6, 5, 4}));
  }
  // Crops keep the image size and only ever introduce zeros.
  for (int i = 0; i < 10; ++i) {
    Tensor x = t;
    augment(x, 1, false, rng);
    EXPECT_EQ(x.shape(), t.shape());
    for (float v : x.values()) EXPECT_TRUE(v == 0.0f || (v >= 1.0f && v <= 6.0f));
  }
  augment(flipped, 0, false, rng);
  EXPECT_EQ(flipped, t);
}
