#pragma once
// Reference implementations used as oracles. They are written directly from
// the definitions with plain loops and double accumulation, sharing no code
// with the library kernels.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "frsp/model.hpp"
#include "frsp/tensor.hpp"

namespace frsp::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo = -1.0f,
                            float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(shape);
  for (float& v : t.values()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

// Direct seven-loop convolution.
inline Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* bias,
                         std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, cout, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = bias && !bias->empty() ? (*bias)[o] : 0.0;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long ih = long(i * stride + u) - long(pad);
                const long iw = long(j * stride + v) - long(pad);
                if (ih < 0 || iw < 0 || ih >= long(h) || iw >= long(wd)) continue;
                s += double(x.at(b, c, std::size_t(ih), std::size_t(iw))) *
                     w.at(o, c, u, v);
              }
          y.at(b, o, i, j) = float(s);
        }
  return y;
}

// Linear map on flattened rows: (B, in) x (out, in)^T.
inline Tensor naive_linear(const Tensor& x, const Tensor& w) {
  const std::size_t n = x.dim(0), out = w.dim(0), in = w.dim(1);
  Tensor y({n, out});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += double(x[b * in + i]) * w[o * in + i];
      y[b * out + o] = float(s);
    }
  return y;
}

// z+ rule (alpha = 1, beta = 0) for one dense layer, from the definition
// R_p = sum_q (a_p w_pq)+ / sum_p' (a_p' w_p'q)+ * R_q.
inline std::vector<double> zplus_oracle(const std::vector<double>& a,
                                        const std::vector<double>& w,  // (out, in)
                                        const std::vector<double>& r_out, double eps) {
  const std::size_t in = a.size(), out = r_out.size();
  std::vector<double> r(in, 0.0);
  for (std::size_t q = 0; q < out; ++q) {
    double den = 0.0;
    for (std::size_t p = 0; p < in; ++p) den += std::max(0.0, a[p] * w[q * in + p]);
    if (std::abs(den) < eps) continue;
    for (std::size_t p = 0; p < in; ++p) r[p] += std::max(0.0, a[p] * w[q * in + p]) / den * r_out[q];
  }
  return r;
}

inline std::uint64_t param_count(const ModelGraph& m) {
  std::uint64_t n = 0;
  for (const auto& [key, t] : m.parameters()) n += t->size();
  return n;
}

// Last layer of the conv -> [bn] -> relu chain that starts at `conv`.
inline int activation_of(const ModelGraph& m, int conv) {
  int id = conv;
  while (true) {
    const auto& next = m.consumers(id);
    if (next.size() != 1) return id;
    const LayerKind k = m.layer(next[0]).spec.kind;
    if (k != LayerKind::BatchNorm && k != LayerKind::Relu) return id;
    id = next[0];
  }
}

// Parameters freed by removing one output channel of `conv`: its filter
// and bias, the BN pair, and the matching input slices of every consumer.
inline std::uint64_t removal_param_delta(const ModelGraph& m, int conv) {
  const Layer& c = m.layer(conv);
  std::uint64_t delta = c.weight.size() / c.weight.dim(0) + (c.bias.empty() ? 0 : 1);
  for (const ChannelDependency& d : m.dependents(conv)) {
    const Layer& l = m.layer(d.layer);
    if (d.kind == SliceKind::BatchNormEntry) delta += 2;
    if (d.kind == SliceKind::ConvInput) delta += l.weight.dim(0) * l.weight.dim(2) * l.weight.dim(3);
    if (d.kind == SliceKind::LinearInput) delta += l.weight.dim(0) * d.span;
  }
  return delta;
}

// Random bias-free sequential CNN: 2 to 4 conv layers, each followed by relu
// and sometimes maxpool, and a linear head reading the flattened maps.
// `mixed_kernels` allows 1x1 convs and single-channel inputs, whose tiny
// fan-in makes empty alpha-beta denominators common.
inline ModelGraph random_cnn(std::mt19937_64& rng, bool batch_norm = false,
                             bool mixed_kernels = true) {
  std::uniform_int_distribution<int> layers(2, 4), coin(0, 1);
  std::uniform_int_distribution<int> width(mixed_kernels ? 2 : 4, mixed_kernels ? 6 : 8);
  const std::size_t cin = !mixed_kernels || coin(rng) ? 3 : 1;
  const std::size_t side = 8;
  ModelBuilder b({cin, side, side}, 4);
  int x = kModelInput;
  std::size_t hw = side;
  const int n = layers(rng);
  for (int i = 0; i < n; ++i) {
    const std::size_t k = !mixed_kernels || coin(rng) ? 3 : 1;
    x = b.conv(x, std::size_t(width(rng)), k);
    if (batch_norm) x = b.bn(x);
    x = b.relu(x);
    if (hw >= 4 && coin(rng)) {
      x = b.maxpool(x);
      hw /= 2;
    }
  }
  b.linear(x, 4, false);
  return std::move(b).build(rng());
}

}  // namespace frsp::testing
