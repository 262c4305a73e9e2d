// aarch64 only; NEON is part of the base ISA there.

#include <arm_neon.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kernels_impl.hpp"

namespace frsp::simd::detail {
namespace {

// Row-broadcast gemm: each output row accumulates a * B[p, :] four lanes at
// a time. Transposed B is packed first so rows are contiguous.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const float* a, std::size_t lda, const float* b, std::size_t ldb,
          float* c, std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  thread_local std::vector<float> bt;
  if (tb == Trans::Yes) {
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
    }
    b = bt.data();
    ldb = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    float* row = c + i * ldc;
    if (!accumulate) std::fill_n(row, n, 0.0f);
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ta == Trans::No ? a[i * lda + p] : a[p * lda + i];
      const float32x4_t va = vdupq_n_f32(av);
      const float* brow = b + p * ldb;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        vst1q_f32(row + j, vfmaq_f32(vld1q_f32(row + j), va, vld1q_f32(brow + j)));
      }
      for (; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  const float32x4_t va = vdupq_n_f32(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

float dot(std::size_t n, const float* x, const float* y) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(x + i), vld1q_f32(y + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void mul(std::size_t n, const float* x, const float* y, float* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(vld1q_f32(x + i), vld1q_f32(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void relu(std::size_t n, const float* x, float* y) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vmaxq_f32(vld1q_f32(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(std::size_t n, const float* y, const float* g, float* dx) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const uint32x4_t keep = vcgtq_f32(vld1q_f32(y + i), zero);
    vst1q_f32(dx + i, vreinterpretq_f32_u32(
                          vandq_u32(keep, vreinterpretq_u32_f32(vld1q_f32(g + i)))));
  }
  for (; i < n; ++i) dx[i] = y[i] > 0.0f ? g[i] : 0.0f;
}

void sgd_momentum(std::size_t n, float lr, float momentum, float wd,
                  const float* g, float* v, float* w) {
  const float32x4_t vmu = vdupq_n_f32(momentum);
  const float32x4_t vwd = vdupq_n_f32(wd);
  const float32x4_t vlr = vdupq_n_f32(lr);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t wv = vld1q_f32(w + i);
    const float32x4_t vv = vaddq_f32(
        vaddq_f32(vmulq_f32(vmu, vld1q_f32(v + i)), vld1q_f32(g + i)),
        vmulq_f32(vwd, wv));
    vst1q_f32(v + i, vv);
    vst1q_f32(w + i, vsubq_f32(wv, vmulq_f32(vlr, vv)));
  }
  for (; i < n; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * w[i];
    w[i] -= lr * v[i];
  }
}

void split_signs(std::size_t n, const float* x, float* pos, float* neg) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t xv = vld1q_f32(x + i);
    vst1q_f32(pos + i, vmaxq_f32(xv, zero));
    vst1q_f32(neg + i, vminq_f32(xv, zero));
  }
  for (; i < n; ++i) {
    pos[i] = std::max(x[i], 0.0f);
    neg[i] = std::min(x[i], 0.0f);
  }
}

void stable_divide(std::size_t n, const float* num, const float* den,
                   float eps, float* out) {
  const float32x4_t veps = vdupq_n_f32(eps);
  const float32x4_t one = vdupq_n_f32(1.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t d = vld1q_f32(den + i);
    const uint32x4_t keep = vcgeq_f32(vabsq_f32(d), veps);
    const float32x4_t safe = vbslq_f32(keep, d, one);
    const float32x4_t q = vdivq_f32(vld1q_f32(num + i), safe);
    vst1q_f32(out + i, vreinterpretq_f32_u32(vandq_u32(keep, vreinterpretq_u32_f32(q))));
  }
  for (; i < n; ++i) out[i] = std::fabs(den[i]) < eps ? 0.0f : num[i] / den[i];
}

}  // namespace

const Kernels& neon_kernels() {
  static const Kernels k{Isa::Neon,    gemm,         axpy,
                         dot,          mul,          relu,
                         relu_backward, sgd_momentum, split_signs,
                         stable_divide};
  return k;
}

}  // namespace frsp::simd::detail
