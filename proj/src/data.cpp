#include "frsp/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace frsp {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape s{indices.size()};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  Tensor out(s);
  const std::size_t n = sample_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("Dataset::batch: index out of range");
    std::copy_n(pixels.data() + indices[i] * n, n, out.data() + i * n);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  Dataset d{sample_shape, classes, {}, {}};
  d.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * sample_size()));
  d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return d;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d{sample_shape, classes, {}, batch_labels(indices)};
  const Tensor t = batch(indices);
  d.pixels.assign(t.values().begin(), t.values().end());
  return d;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

struct IdxFile {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t offset = 0;
};

IdxFile parse_idx(const std::string& path) {
  IdxFile f;
  f.bytes = read_file(path);
  if (f.bytes.size() < 4) throw DataError(path + ": truncated idx header");
  const std::uint32_t magic = be32(f.bytes, 0);
  if ((magic >> 8) != 0x08) {
    std::ostringstream os;
    os << path << ": bad idx magic 0x" << std::hex << magic << " (expected unsigned byte data)";
    throw DataError(os.str());
  }
  const std::size_t rank = magic & 0xff;
  if (rank == 0 || rank > 4) throw DataError(path + ": unsupported idx rank " + std::to_string(rank));
  f.offset = 4 + 4 * rank;
  if (f.bytes.size() < f.offset) throw DataError(path + ": truncated idx header");
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    f.dims.push_back(be32(f.bytes, 4 + 4 * i));
    total *= f.dims.back();
  }
  if (f.bytes.size() - f.offset < total) {
    throw DataError(path + ": truncated idx payload (" + std::to_string(f.bytes.size() - f.offset) +
                    " bytes for " + std::to_string(total) + ")");
  }
  return f;
}

void check_label(int label, std::size_t classes, const std::string& where) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw DataError(where + ": label " + std::to_string(label) + " exceeds " +
                    std::to_string(classes - 1));
  }
}

}  // namespace

Dataset read_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes) {
  const IdxFile img = parse_idx(images_path);
  const IdxFile lab = parse_idx(labels_path);
  if (img.dims.size() < 3) throw DataError(images_path + ": idx images need 3 or 4 dims");
  if (lab.dims.size() != 1) throw DataError(labels_path + ": idx labels need 1 dim");
  if (img.dims[0] != lab.dims[0]) {
    throw DataError(images_path + ": " + std::to_string(img.dims[0]) + " images but " +
                    std::to_string(lab.dims[0]) + " labels");
  }
  Dataset d;
  d.classes = classes;
  d.sample_shape = img.dims.size() == 3 ? Shape{1, img.dims[1], img.dims[2]}
                                        : Shape{img.dims[1], img.dims[2], img.dims[3]};
  const std::size_t n = img.dims[0] * d.sample_size();
  d.pixels.assign(img.bytes.begin() + static_cast<std::ptrdiff_t>(img.offset),
                  img.bytes.begin() + static_cast<std::ptrdiff_t>(img.offset + n));
  for (std::size_t i = 0; i < lab.dims[0]; ++i) {
    const int label = lab.bytes[lab.offset + i];
    check_label(label, classes, labels_path);
    d.labels.push_back(label);
  }
  return d;
}

Dataset load_cifar_binary(std::span<const std::string> paths, std::size_t classes) {
  constexpr std::size_t kPixels = 3 * 32 * 32, kRecord = kPixels + 1;
  Dataset d;
  d.classes = classes;
  d.sample_shape = {3, 32, 32};
  for (const std::string& path : paths) {
    const std::vector<unsigned char> bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw DataError(path + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte record");
    }
    for (std::size_t at = 0; at < bytes.size(); at += kRecord) {
      const int label = bytes[at];
      check_label(label, classes, path);
      d.labels.push_back(label);
      d.pixels.insert(d.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(at + 1),
                      bytes.begin() + static_cast<std::ptrdiff_t>(at + kRecord));
    }
  }
  return d;
}

// Each class owns a template of three Gaussian blobs with their own position,
// width and color. A sample is its class template, shifted by up to a quarter
// of the image, scaled by a random amplitude, overlaid with a fainter copy of
// another class's template, plus pixel noise.
Dataset synth_dataset(std::uint64_t seed, std::uint64_t stream, std::size_t count,
                      const Shape& sample_shape, std::size_t classes, float noise) {
  if (sample_shape.size() != 3 || classes == 0) {
    throw std::invalid_argument("synth_dataset: need a (C, H, W) shape and classes > 0");
  }
  const std::size_t ch = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
  const std::size_t plane = h * w, n = ch * plane;

  std::mt19937_64 trng(seed * 0x9E3779B97F4A7C15ULL + 17);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const std::size_t pad_h = h / 4, pad_w = w / 4;
  const std::size_t th = h + 2 * pad_h, tw = w + 2 * pad_w;
  std::vector<float> templates(classes * ch * th * tw, 0.0f);
  for (std::size_t c = 0; c < classes; ++c) {
    for (int blob = 0; blob < 3; ++blob) {
      const float cy = pad_h + unit(trng) * float(h - 1);
      const float cx = pad_w + unit(trng) * float(w - 1);
      const float sigma = 1.0f + unit(trng) * float(std::min(h, w)) / 8.0f;
      std::vector<float> color(ch);
      for (float& v : color) v = 2.0f * unit(trng) - 1.0f;
      for (std::size_t k = 0; k < ch; ++k) {
        float* t = templates.data() + (c * ch + k) * th * tw;
        for (std::size_t y = 0; y < th; ++y) {
          for (std::size_t x = 0; x < tw; ++x) {
            const float dy = float(y) - cy, dx = float(x) - cx;
            t[y * tw + x] += color[k] * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
          }
        }
      }
    }
  }

  std::mt19937_64 rng(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> shift_y(0, 2 * pad_h), shift_x(0, 2 * pad_w);
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);

  Dataset d;
  d.sample_shape = sample_shape;
  d.classes = classes;
  d.pixels.resize(count * n);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) d.labels[i] = static_cast<int>(i % classes);
  std::shuffle(d.labels.begin(), d.labels.end(), rng);

  auto paint = [&](float* dst, std::size_t cls, float amp) {
    const std::size_t oy = shift_y(rng), ox = shift_x(rng);
    for (std::size_t k = 0; k < ch; ++k) {
      const float* t = templates.data() + (cls * ch + k) * th * tw;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          dst[k * plane + y * w + x] += amp * t[(y + oy) * tw + x + ox];
        }
      }
    }
  };
  for (std::size_t i = 0; i < count; ++i) {
    float* dst = d.pixels.data() + i * n;
    const auto label = static_cast<std::size_t>(d.labels[i]);
    paint(dst, label, 0.6f + 0.8f * unit(rng));
    std::size_t other = pick(rng);
    if (other == label) other = (other + 1) % classes;
    if (classes > 1) paint(dst, other, 0.5f * unit(rng));
    for (std::size_t j = 0; j < n; ++j) dst[j] += noise * gauss(rng);
  }
  return d;
}

void normalize(Dataset& d, std::span<const float> mean, std::span<const float> stddev) {
  const std::size_t ch = d.sample_shape.at(0);
  if ((!mean.empty() && mean.size() != ch) || (!stddev.empty() && stddev.size() != ch)) {
    throw DataError("normalization constants need " + std::to_string(ch) + " channels");
  }
  const std::size_t plane = d.sample_size() / ch;
  for (std::size_t i = 0; i < d.pixels.size(); ++i) {
    const std::size_t k = (i / plane) % ch;
    const float m = mean.empty() ? 0.0f : mean[k];
    const float s = stddev.empty() ? 1.0f : stddev[k];
    d.pixels[i] = (d.pixels[i] - m) / s;
  }
}

namespace {

std::vector<std::string> split_paths(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Dataset load_split(const DatasetSpec& spec, const std::string& path, std::size_t limit) {
  Dataset d;
  if (spec.format == DataFormat::Idx) {
    const auto parts = split_paths(path);
    if (parts.size() != 2) throw DataError("idx path must be 'images,labels', got '" + path + "'");
    d = read_idx(parts[0], parts[1], spec.classes);
  } else {
    const auto parts = split_paths(path);
    if (parts.empty()) throw DataError("cifar path is empty");
    d = load_cifar_binary(parts, spec.classes);
  }
  for (float& v : d.pixels) v /= 255.0f;
  return limit ? d.head(limit) : d;
}

}  // namespace

DataSplits load_dataset(const DatasetSpec& spec) {
  DataSplits s;
  if (spec.format == DataFormat::Synthetic) {
    s.train = synth_dataset(spec.seed, 0, spec.train_size, spec.sample_shape, spec.classes,
                            spec.noise);
    s.test = synth_dataset(spec.seed, 1, spec.test_size, spec.sample_shape, spec.classes,
                           spec.noise);
  } else {
    s.train = load_split(spec, spec.train_path, spec.train_size);
    s.test = load_split(spec, spec.test_path, spec.test_size);
  }
  normalize(s.train, spec.mean, spec.stddev);
  normalize(s.test, spec.mean, spec.stddev);
  return s;
}

void augment(Tensor& batch, std::size_t crop_pad, bool flip, std::mt19937_64& rng) {
  if (crop_pad == 0 && !flip) return;
  if (batch.rank() != 4) throw ShapeError("augment: batch must be rank 4");
  const std::size_t n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * crop_pad);
  std::bernoulli_distribution coin(0.5);
  std::vector<float> tmp(ch * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    float* img = batch.data() + i * ch * h * w;
    const std::size_t oy = crop_pad ? offset(rng) : crop_pad;
    const std::size_t ox = crop_pad ? offset(rng) : crop_pad;
    const bool mirror = flip && coin(rng);
    for (std::size_t k = 0; k < ch; ++k) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          // Source pixel in the padded image, shifted back to unpadded coords.
          const auto sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(crop_pad);
          const std::size_t xx = mirror ? w - 1 - x : x;
          const auto sx = static_cast<std::ptrdiff_t>(xx + ox) - static_cast<std::ptrdiff_t>(crop_pad);
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                              sx < static_cast<std::ptrdiff_t>(w);
          tmp[(k * h + y) * w + x] =
              inside ? img[(k * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)]
                     : 0.0f;
        }
      }
    }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace frsp
