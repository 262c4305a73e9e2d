#include "frsp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "frsp/flops.hpp"
#include "frsp/simd.hpp"

namespace frsp {

namespace {
// Per thread, so concurrent runs do not pollute each other's measurements.
thread_local std::uint64_t g_flops = 0;
}

void FlopCounter::add(std::uint64_t n) noexcept {
  g_flops += n;
}
std::uint64_t FlopCounter::read() noexcept {
  return g_flops;
}
void FlopCounter::reset() noexcept { g_flops = 0; }

}  // namespace frsp

namespace frsp::ops {
namespace {

using simd::Trans;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, kh, kw, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

ConvDims conv_dims(const Shape& in, const Shape& wt, ConvGeometry g) {
  if (in.size() != 4) {
    throw ShapeError("conv2d: input must be (B, Cin, H, W), got " + shape_str(in));
  }
  if (wt.size() != 4) {
    throw ShapeError("conv2d: weight must be (Cout, Cin, Kh, Kw), got " +
                     shape_str(wt));
  }
  if (in[1] != wt[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(in[1]) +
                     " != weight input channels " + std::to_string(wt[1]));
  }
  if (g.stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (in[2] + 2 * g.pad < wt[2] || in[3] + 2 * g.pad < wt[3]) {
    throw ShapeError("conv2d: kernel " + std::to_string(wt[2]) + "x" +
                     std::to_string(wt[3]) + " larger than padded input " +
                     shape_str(in));
  }
  ConvDims d{};
  d.batch = in[0];
  d.cin = in[1];
  d.h = in[2];
  d.w = in[3];
  d.cout = wt[0];
  d.kh = wt[2];
  d.kw = wt[3];
  d.ho = (d.h + 2 * g.pad - d.kh) / g.stride + 1;
  d.wo = (d.w + 2 * g.pad - d.kw) / g.stride + 1;
  return d;
}

bool is_pointwise(const ConvDims& d, ConvGeometry g) {
  return d.kh == 1 && d.kw == 1 && g.stride == 1 && g.pad == 0;
}

// Valid output columns [lo, hi) for kernel offset kw: those whose input
// column ow * stride + kw - pad falls inside [0, w).
void valid_cols(const ConvDims& d, ConvGeometry g, std::size_t kw, std::size_t& lo,
                std::size_t& hi) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kw) - pad;
  std::ptrdiff_t l = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(d.w) - 1 - off) / s + 1;
  if (static_cast<std::ptrdiff_t>(d.w) - 1 - off < 0) h = 0;
  l = std::min<std::ptrdiff_t>(l, static_cast<std::ptrdiff_t>(d.wo));
  h = std::clamp<std::ptrdiff_t>(h, l, static_cast<std::ptrdiff_t>(d.wo));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

// Stride 1 with Ho == H and Wo == W: every col row is the input plane shifted
// by a constant offset, with the wrapped and out-of-range entries zeroed.
bool same_plane(const ConvDims& d, ConvGeometry g) {
  return g.stride == 1 && d.ho == d.h && d.wo == d.w;
}

// Valid output range [j0, j1) of the flattened plane and the source offset.
void shifted_range(const ConvDims& d, ConvGeometry g, std::size_t kh, std::size_t kw,
                   std::ptrdiff_t& offset, std::size_t& j0, std::size_t& j1) {
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  const auto n = static_cast<std::ptrdiff_t>(d.h * d.w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  offset = (static_cast<std::ptrdiff_t>(kh) - pad) * w + static_cast<std::ptrdiff_t>(kw) - pad;
  j0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-offset, 0, n));
  j1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(n - offset, 0, n));
}

// Zeroes the columns of every output row that read across a row edge.
void clear_wrapped(float* row, const ConvDims& d, std::size_t lo, std::size_t hi) {
  for (std::size_t oh = 0; oh < d.ho; ++oh) {
    float* r = row + oh * d.wo;
    for (std::size_t ow = 0; ow < lo; ++ow) r[ow] = 0.0f;
    for (std::size_t ow = hi; ow < d.wo; ++ow) r[ow] = 0.0f;
  }
}

// col is (Cin*Kh*Kw) x (Ho*Wo) with row stride ld.
void im2col(const float* x, const ConvDims& d, ConvGeometry g, float* col, std::size_t ld) {
  if (same_plane(d, g)) {
    const std::size_t n = d.h * d.w;
    for (std::size_t c = 0; c < d.cin; ++c) {
      const float* plane = x + c * n;
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          float* row = col + ((c * d.kh + kh) * d.kw + kw) * ld;
          std::ptrdiff_t offset;
          std::size_t j0, j1, lo, hi;
          shifted_range(d, g, kh, kw, offset, j0, j1);
          for (std::size_t j = 0; j < j0; ++j) row[j] = 0.0f;
          const float* src = plane + (static_cast<std::ptrdiff_t>(j0) + offset);
          for (std::size_t j = j0; j < j1; ++j) row[j] = src[j - j0];
          for (std::size_t j = j1; j < n; ++j) row[j] = 0.0f;
          valid_cols(d, g, kw, lo, hi);
          if (lo > 0 || hi < d.wo) clear_wrapped(row, d, lo, hi);
        }
      }
    }
    return;
  }
  for (std::size_t c = 0; c < d.cin; ++c) {
    const float* plane = x + c * d.h * d.w;
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        float* row = col + ((c * d.kh + kh) * d.kw + kw) * ld;
        std::size_t lo, hi;
        valid_cols(d, g, kw, lo, hi);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kw) -
                                     static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          float* out = row + oh * d.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) {
            for (std::size_t ow = 0; ow < d.wo; ++ow) out[ow] = 0.0f;
            continue;
          }
          const float* src = plane + ih * static_cast<std::ptrdiff_t>(d.w) + shift;
          for (std::size_t ow = 0; ow < lo; ++ow) out[ow] = 0.0f;
          if (g.stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) out[ow] = src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) out[ow] = src[ow * g.stride];
          }
          for (std::size_t ow = hi; ow < d.wo; ++ow) out[ow] = 0.0f;
        }
      }
    }
  }
}

// Scatter-add of col (row stride ld) back into the (Cin, H, W) plane set.
// Entries of col that fall outside the input are overwritten with zero.
void col2im(float* col, const ConvDims& d, ConvGeometry g, float* x, std::size_t ld) {
  if (same_plane(d, g)) {
    const std::size_t n = d.h * d.w;
    for (std::size_t c = 0; c < d.cin; ++c) {
      float* plane = x + c * n;
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          float* row = col + ((c * d.kh + kh) * d.kw + kw) * ld;
          std::ptrdiff_t offset;
          std::size_t j0, j1, lo, hi;
          shifted_range(d, g, kh, kw, offset, j0, j1);
          valid_cols(d, g, kw, lo, hi);
          if (lo > 0 || hi < d.wo) clear_wrapped(row, d, lo, hi);
          float* dst = plane + (static_cast<std::ptrdiff_t>(j0) + offset);
          for (std::size_t j = j0; j < j1; ++j) dst[j - j0] += row[j];
        }
      }
    }
    return;
  }
  for (std::size_t c = 0; c < d.cin; ++c) {
    float* plane = x + c * d.h * d.w;
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        const float* row = col + ((c * d.kh + kh) * d.kw + kw) * ld;
        std::size_t lo, hi;
        valid_cols(d, g, kw, lo, hi);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kw) -
                                     static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
          float* dst = plane + ih * static_cast<std::ptrdiff_t>(d.w) + shift;
          const float* src = row + oh * d.wo;
          if (g.stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * g.stride] += src[ow];
          }
        }
      }
    }
  }
}

// Samples per gemm so that the column buffer stays near 64K floats.
std::size_t chunk_samples(const ConvDims& d) {
  constexpr std::size_t kBudget = std::size_t{1} << 16;
  const std::size_t per = std::max<std::size_t>(1, d.patch() * d.pixels());
  return std::clamp<std::size_t>(kBudget / per, 1, std::max<std::size_t>(d.batch, 1));
}

struct Scratch {
  std::vector<float> col, rows, dcol;
};

Scratch& scratch() {
  thread_local Scratch s;
  return s;
}

// Copies (S, C, P) sample-major planes into a C x (S*P) matrix and back.
void gather_planes(const float* src, std::size_t s, std::size_t c, std::size_t p, float* dst) {
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      std::copy_n(src + (i * c + k) * p, p, dst + k * s * p + i * p);
    }
  }
}

void scatter_planes(const float* src, std::size_t s, std::size_t c, std::size_t p, float* dst) {
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      std::copy_n(src + k * s * p + i * p, p, dst + (i * c + k) * p);
    }
  }
}

// Builds the column matrix patch x (S*P) for samples [b0, b0 + s).
void build_columns(const float* input, const ConvDims& d, ConvGeometry g, std::size_t b0,
                   std::size_t s, std::vector<float>& col) {
  const std::size_t pixels = d.pixels(), ld = s * pixels;
  col.resize(d.patch() * ld);
  for (std::size_t i = 0; i < s; ++i) {
    im2col(input + (b0 + i) * d.cin * d.h * d.w, d, g, col.data() + i * pixels, ld);
  }
}

std::size_t features(const Tensor& t) {
  return t.shape()[0] ? t.size() / t.shape()[0] : 0;
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight,
                          ConvGeometry g) {
  const ConvDims d = conv_dims(input, weight, g);
  return {d.batch, d.cout, d.ho, d.wo};
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      const Tensor* bias, ConvGeometry g) {
  const ConvDims d = conv_dims(input.shape(), weight.shape(), g);
  if (bias && !bias->empty() && bias->size() != d.cout) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias->size()) +
                     " entries for " + std::to_string(d.cout) + " filters");
  }
  const auto& k = simd::active();
  Tensor out({d.batch, d.cout, d.ho, d.wo});
  const std::size_t patch = d.patch(), pixels = d.pixels();
  const bool pointwise = is_pointwise(d, g);
  const std::size_t step = chunk_samples(d);
  Scratch& sc = scratch();
  for (std::size_t b0 = 0; b0 < d.batch; b0 += step) {
    const std::size_t s = std::min(step, d.batch - b0), ld = s * pixels;
    if (pointwise) {
      sc.col.resize(patch * ld);
      gather_planes(input.data() + b0 * d.cin * pixels, s, d.cin, pixels, sc.col.data());
    } else {
      build_columns(input.data(), d, g, b0, s, sc.col);
    }
    sc.rows.resize(d.cout * ld);
    k.gemm(Trans::No, Trans::No, d.cout, ld, patch, weight.data(), patch, sc.col.data(), ld,
           sc.rows.data(), ld, false);
    float* y = out.data() + b0 * d.cout * pixels;
    scatter_planes(sc.rows.data(), s, d.cout, pixels, y);
    if (bias && !bias->empty()) {
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t o = 0; o < d.cout; ++o) {
          const float bv = (*bias)[o];
          float* plane = y + (i * d.cout + o) * pixels;
          for (std::size_t p = 0; p < pixels; ++p) plane[p] += bv;
        }
      }
    }
  }
  FlopCounter::add(static_cast<std::uint64_t>(d.batch) * d.cout * patch * pixels);
  require_finite(out, "conv2d_forward");
  return out;
}

namespace {

// dX for samples [b0, b0 + s) from dY gathered as Cout x (S*P).
void input_grad_chunk(const float* dy_rows, const Tensor& weight, const ConvDims& d,
                      ConvGeometry g, std::size_t b0, std::size_t s, Scratch& sc, float* dx) {
  const auto& k = simd::active();
  const std::size_t patch = d.patch(), pixels = d.pixels(), ld = s * pixels;
  sc.dcol.resize(patch * ld);
  k.gemm(Trans::Yes, Trans::No, patch, ld, d.cout, weight.data(), patch, dy_rows, ld,
         sc.dcol.data(), ld, false);
  const std::size_t plane = d.cin * d.h * d.w;
  if (is_pointwise(d, g)) {
    scatter_planes(sc.dcol.data(), s, d.cin, pixels, dx + b0 * plane);
    return;
  }
  for (std::size_t i = 0; i < s; ++i) {
    col2im(sc.dcol.data() + i * pixels, d, g, dx + (b0 + i) * plane, ld);
  }
}

}  // namespace

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weight,
                          bool has_bias, const Tensor& grad_out, ConvGeometry g,
                          bool need_input_grad) {
  if (input.empty()) {
    throw std::logic_error("conv2d_backward: missing forward context (input)");
  }
  const ConvDims d = conv_dims(input.shape(), weight.shape(), g);
  require_shape(grad_out, {d.batch, d.cout, d.ho, d.wo}, "conv2d_backward grad_out");
  const auto& k = simd::active();
  const std::size_t patch = d.patch(), pixels = d.pixels();

  ConvGrads grads;
  grads.weight = Tensor(weight.shape());
  if (has_bias) grads.bias = Tensor({d.cout});
  if (need_input_grad) grads.input = Tensor(input.shape());

  const bool pointwise = is_pointwise(d, g);
  const std::size_t step = chunk_samples(d);
  Scratch& sc = scratch();
  std::vector<float> dy_rows;
  for (std::size_t b0 = 0; b0 < d.batch; b0 += step) {
    const std::size_t s = std::min(step, d.batch - b0), ld = s * pixels;
    if (pointwise) {
      sc.col.resize(patch * ld);
      gather_planes(input.data() + b0 * d.cin * pixels, s, d.cin, pixels, sc.col.data());
    } else {
      build_columns(input.data(), d, g, b0, s, sc.col);
    }
    dy_rows.resize(d.cout * ld);
    gather_planes(grad_out.data() + b0 * d.cout * pixels, s, d.cout, pixels, dy_rows.data());
    // dW += dY (Cout x SP) * col^T (SP x patch)
    k.gemm(Trans::No, Trans::Yes, d.cout, patch, ld, dy_rows.data(), ld, sc.col.data(), ld,
           grads.weight.data(), patch, true);
    if (has_bias) {
      for (std::size_t o = 0; o < d.cout; ++o) {
        float acc = 0.0f;
        const float* row = dy_rows.data() + o * ld;
        for (std::size_t p = 0; p < ld; ++p) acc += row[p];
        grads.bias[o] += acc;
      }
    }
    if (need_input_grad) {
      input_grad_chunk(dy_rows.data(), weight, d, g, b0, s, sc, grads.input.data());
    }
  }
  const std::uint64_t macs =
      static_cast<std::uint64_t>(d.batch) * d.cout * patch * pixels;
  FlopCounter::add(need_input_grad ? 2 * macs : macs);
  require_finite(grads.weight, "conv2d_backward");
  if (need_input_grad) require_finite(grads.input, "conv2d_backward");
  return grads;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& input_shape, ConvGeometry g) {
  const ConvDims d = conv_dims(input_shape, weight.shape(), g);
  require_shape(grad_out, {d.batch, d.cout, d.ho, d.wo},
                "conv2d_backward_input grad_out");
  const std::size_t patch = d.patch(), pixels = d.pixels();
  Tensor dx(input_shape);
  const std::size_t step = chunk_samples(d);
  Scratch& sc = scratch();
  std::vector<float> dy_rows;
  for (std::size_t b0 = 0; b0 < d.batch; b0 += step) {
    const std::size_t s = std::min(step, d.batch - b0);
    dy_rows.resize(d.cout * s * pixels);
    gather_planes(grad_out.data() + b0 * d.cout * pixels, s, d.cout, pixels, dy_rows.data());
    input_grad_chunk(dy_rows.data(), weight, d, g, b0, s, sc, dx.data());
  }
  FlopCounter::add(static_cast<std::uint64_t>(d.batch) * d.cout * patch * pixels);
  require_finite(dx, "conv2d_backward_input");
  return dx;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y(x.shape());
  simd::active().relu(x.size(), x.data(), y.data());
  FlopCounter::add(x.size());
  require_finite(y, "relu_forward");
  return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& grad_out) {
  require_shape(grad_out, y.shape(), "relu_backward grad_out");
  Tensor dx(y.shape());
  simd::active().relu_backward(y.size(), y.data(), grad_out.data(), dx.data());
  FlopCounter::add(y.size());
  return dx;
}

PoolResult maxpool2_forward(const Tensor& x) {
  require_rank(x, 4, "maxpool2");
  const auto& s = x.shape();
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  if (h < 2 || w < 2) {
    throw ShapeError("maxpool2: spatial dims must be >= 2, got " + shape_str(s));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  PoolResult r{Tensor({b, c, ho, wo}), std::vector<std::uint32_t>(b * c * ho * wo)};
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const float* src = x.data() + plane * h * w;
    float* dst = r.output.data() + plane * ho * wo;
    std::uint32_t* idx = r.argmax.data() + plane * ho * wo;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = (2 * oh) * w + 2 * ow;
        for (std::size_t dh = 0; dh < 2; ++dh) {
          for (std::size_t dw = 0; dw < 2; ++dw) {
            const std::size_t at = (2 * oh + dh) * w + 2 * ow + dw;
            if (src[at] > src[best]) best = at;
          }
        }
        dst[oh * wo + ow] = src[best];
        idx[oh * wo + ow] = static_cast<std::uint32_t>(best);
      }
    }
  }
  FlopCounter::add(x.size());
  require_finite(r.output, "maxpool2_forward");
  return r;
}

Tensor maxpool2_backward(const Tensor& grad_out,
                         std::span<const std::uint32_t> argmax,
                         const Shape& input_shape) {
  if (input_shape.size() != 4) {
    throw ShapeError("maxpool2_backward: input shape must be rank 4");
  }
  const std::size_t b = input_shape[0], c = input_shape[1], h = input_shape[2],
                    w = input_shape[3];
  require_shape(grad_out, {b, c, h / 2, w / 2}, "maxpool2_backward grad_out");
  if (argmax.size() != grad_out.size()) {
    throw std::logic_error("maxpool2_backward: argmax records missing or stale");
  }
  Tensor dx(input_shape);
  const std::size_t out_plane = (h / 2) * (w / 2);
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    float* dst = dx.data() + plane * h * w;
    const float* g = grad_out.data() + plane * out_plane;
    const std::uint32_t* idx = argmax.data() + plane * out_plane;
    for (std::size_t i = 0; i < out_plane; ++i) dst[idx[i]] += g[i];
  }
  return dx;
}

Tensor global_avgpool_forward(const Tensor& x) {
  require_rank(x, 4, "global_avgpool");
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1], area = s[2] * s[3];
  Tensor y({s[0], s[1], 1, 1});
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.data() + p * area;
    float acc = 0.0f;
    for (std::size_t i = 0; i < area; ++i) acc += src[i];
    y[p] = acc / static_cast<float>(area);
  }
  FlopCounter::add(x.size());
  return y;
}

Tensor global_avgpool_backward(const Tensor& grad_out, const Shape& input_shape) {
  if (input_shape.size() != 4) {
    throw ShapeError("global_avgpool_backward: input shape must be rank 4");
  }
  require_shape(grad_out, {input_shape[0], input_shape[1], 1, 1},
                "global_avgpool_backward grad_out");
  Tensor dx(input_shape);
  const std::size_t area = input_shape[2] * input_shape[3];
  const float inv = 1.0f / static_cast<float>(area);
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    std::fill_n(dx.data() + p * area, area, grad_out[p] * inv);
  }
  return dx;
}

Tensor linear_forward(const Tensor& input, const Tensor& weight,
                      const Tensor* bias) {
  require_rank(weight, 2, "linear weight");
  if (input.rank() < 1) throw ShapeError("linear: input must have a batch dim");
  const std::size_t batch = input.shape()[0], in = features(input),
                    out = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw ShapeError("linear: input has " + std::to_string(in) +
                     " features per sample but weight is " +
                     shape_str(weight.shape()));
  }
  if (bias && !bias->empty() && bias->size() != out) {
    throw ShapeError("linear: bias has " + std::to_string(bias->size()) +
                     " entries for " + std::to_string(out) + " outputs");
  }
  Tensor y({batch, out});
  simd::active().gemm(Trans::No, Trans::Yes, batch, out, in, input.data(), in,
                      weight.data(), in, y.data(), out, false);
  if (bias && !bias->empty()) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < out; ++o) y[b * out + o] += (*bias)[o];
    }
  }
  FlopCounter::add(static_cast<std::uint64_t>(batch) * in * out);
  require_finite(y, "linear_forward");
  return y;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weight,
                            bool has_bias, const Tensor& grad_out,
                            bool need_input_grad) {
  if (input.empty()) {
    throw std::logic_error("linear_backward: missing forward context (input)");
  }
  const std::size_t batch = input.shape()[0], in = features(input),
                    out = weight.shape()[0];
  require_shape(grad_out, {batch, out}, "linear_backward grad_out");
  const auto& k = simd::active();
  LinearGrads g;
  g.weight = Tensor(weight.shape());
  // dW (out x in) = dY^T (out x B) * X (B x in)
  k.gemm(Trans::Yes, Trans::No, out, in, batch, grad_out.data(), out,
         input.data(), in, g.weight.data(), in, false);
  if (has_bias) {
    g.bias = Tensor({out});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_out[b * out + o];
    }
  }
  if (need_input_grad) {
    g.input = Tensor(input.shape());
    k.gemm(Trans::No, Trans::No, batch, in, out, grad_out.data(), out,
           weight.data(), in, g.input.data(), in, false);
  }
  const std::uint64_t macs = static_cast<std::uint64_t>(batch) * in * out;
  FlopCounter::add(need_input_grad ? 2 * macs : macs);
  return g;
}

Tensor linear_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& input_shape) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out = weight.shape()[0], in = weight.shape()[1];
  const std::size_t batch = input_shape.empty() ? 0 : input_shape[0];
  if (shape_numel(input_shape) != batch * in) {
    throw ShapeError("linear_backward_input: input shape " + shape_str(input_shape) +
                     " does not match weight " + shape_str(weight.shape()));
  }
  require_shape(grad_out, {batch, out}, "linear_backward_input grad_out");
  Tensor dx(input_shape);
  simd::active().gemm(Trans::No, Trans::No, batch, in, out, grad_out.data(), out,
                      weight.data(), in, dx.data(), in, false);
  FlopCounter::add(static_cast<std::uint64_t>(batch) * in * out);
  require_finite(dx, "linear_backward_input");
  return dx;
}

Tensor add_forward(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "add: second operand");
  Tensor y = a;
  simd::active().axpy(y.size(), 1.0f, b.data(), y.data());
  FlopCounter::add(a.size());
  require_finite(y, "add_forward");
  return y;
}

XentResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_xent logits");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  XentResult r;
  r.grad = Tensor(logits.shape());
  double total = 0.0;
  const float inv_batch = 1.0f / static_cast<float>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("softmax_xent: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    const float* z = logits.data() + b * classes;
    float* g = r.grad.data() + b * classes;
    const float zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j) denom += std::exp(double(z[j] - zmax));
    const double log_denom = std::log(denom);
    total += log_denom - double(z[y] - zmax);
    for (std::size_t j = 0; j < classes; ++j) {
      const double p = std::exp(double(z[j] - zmax) - log_denom);
      g[j] = static_cast<float>(p) * inv_batch;
    }
    g[y] -= inv_batch;
  }
  r.loss = total / static_cast<double>(batch);
  if (!std::isfinite(r.loss)) throw NumericError("softmax_xent: non-finite loss");
  return r;
}

namespace {

void check_bn_params(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     const Tensor& mean, const Tensor& var) {
  require_rank(x, 4, "batchnorm input");
  const std::size_t c = x.shape()[1];
  for (const Tensor* t : {&gamma, &beta, &mean, &var}) {
    if (t->size() != c) {
      throw ShapeError("batchnorm: parameter vector " + shape_str(t->shape()) +
                       " does not match " + std::to_string(c) + " channels");
    }
  }
}

// Eight independent float lanes per plane, folded into double at the end.
constexpr std::size_t kLanes = 8;

double lane_sum(const float* p, std::size_t n) {
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += p[i + l];
  }
  double s = 0.0;
  for (float a : acc) s += a;
  for (; i < n; ++i) s += p[i];
  return s;
}

double lane_dot(const float* p, const float* q, std::size_t n) {
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += p[i + l] * q[i + l];
  }
  double s = 0.0;
  for (float a : acc) s += a;
  for (; i < n; ++i) s += double(p[i]) * q[i];
  return s;
}

double lane_centered_sq(const float* p, std::size_t n, float m) {
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      const float d = p[i + l] - m;
      acc[l] += d * d;
    }
  }
  double s = 0.0;
  for (float a : acc) s += a;
  for (; i < n; ++i) {
    const double d = double(p[i]) - m;
    s += d * d;
  }
  return s;
}

}  // namespace

Tensor batchnorm_forward_train(const Tensor& x, const Tensor& gamma,
                               const Tensor& beta, Tensor& running_mean,
                               Tensor& running_var, BatchNormCache* cache) {
  check_bn_params(x, gamma, beta, running_mean, running_var);
  const auto& s = x.shape();
  const std::size_t batch = s[0], c = s[1], area = s[2] * s[3];
  const std::size_t count = batch * area;
  Tensor y(s);
  Tensor xhat(s);
  std::vector<float> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < batch; ++b) sum += lane_sum(x.data() + (b * c + ch) * area, area);
    const double mean = sum / double(count);
    const float m = static_cast<float>(mean);
    for (std::size_t b = 0; b < batch; ++b) {
      sq += lane_centered_sq(x.data() + (b * c + ch) * area, area, m);
    }
    const double var = sq / double(count);
    const float istd = static_cast<float>(1.0 / std::sqrt(var + kBnEps));
    inv_std[ch] = istd;
    const float gm = gamma[ch], bt = beta[ch];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c + ch) * area;
      const float* src = x.data() + off;
      float* xh = xhat.data() + off;
      float* dst = y.data() + off;
      for (std::size_t i = 0; i < area; ++i) {
        xh[i] = (src[i] - m) * istd;
        dst[i] = gm * xh[i] + bt;
      }
    }
    const double unbiased = count > 1 ? sq / double(count - 1) : var;
    running_mean[ch] = (1.0f - kBnMomentum) * running_mean[ch] + kBnMomentum * m;
    running_var[ch] = (1.0f - kBnMomentum) * running_var[ch] +
                      kBnMomentum * static_cast<float>(unbiased);
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  FlopCounter::add(x.size());
  require_finite(y, "batchnorm_forward_train");
  return y;
}

Tensor batchnorm_forward_eval(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, const Tensor& running_mean,
                              const Tensor& running_var) {
  check_bn_params(x, gamma, beta, running_mean, running_var);
  const auto& s = x.shape();
  const std::size_t batch = s[0], c = s[1], area = s[2] * s[3];
  Tensor y(s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float scale = gamma[ch] / std::sqrt(running_var[ch] + kBnEps);
    const float shift = beta[ch] - running_mean[ch] * scale;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c + ch) * area;
      const float* src = x.data() + off;
      float* dst = y.data() + off;
      for (std::size_t i = 0; i < area; ++i) dst[i] = src[i] * scale + shift;
    }
  }
  FlopCounter::add(x.size());
  require_finite(y, "batchnorm_forward_eval");
  return y;
}

BatchNormGrads batchnorm_backward(const Tensor& grad_out, const Tensor& gamma,
                                  const BatchNormCache& cache) {
  if (cache.xhat.empty()) {
    throw std::logic_error("batchnorm_backward: missing forward context");
  }
  require_shape(grad_out, cache.xhat.shape(), "batchnorm_backward grad_out");
  const auto& s = grad_out.shape();
  const std::size_t batch = s[0], c = s[1], area = s[2] * s[3];
  const double count = double(batch * area);
  BatchNormGrads g{Tensor(s), Tensor({c}), Tensor({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double dbeta = 0.0, dgamma = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c + ch) * area;
      dbeta += lane_sum(grad_out.data() + off, area);
      dgamma += lane_dot(grad_out.data() + off, cache.xhat.data() + off, area);
    }
    g.beta[ch] = static_cast<float>(dbeta);
    g.gamma[ch] = static_cast<float>(dgamma);
    const float k = static_cast<float>(double(gamma[ch]) * cache.inv_std[ch] / count);
    const float n = static_cast<float>(count);
    const float db = static_cast<float>(dbeta), dg = static_cast<float>(dgamma);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c + ch) * area;
      const float* go = grad_out.data() + off;
      const float* xh = cache.xhat.data() + off;
      float* gi = g.input.data() + off;
      for (std::size_t i = 0; i < area; ++i) gi[i] = k * (n * go[i] - db - xh[i] * dg);
    }
  }
  require_finite(g.input, "batchnorm_backward");
  return g;
}

}  // namespace frsp::ops
