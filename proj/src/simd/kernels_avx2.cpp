// Compiled with -mavx2 -mfma; only reached after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kernels_impl.hpp"

namespace frsp::simd::detail {
namespace {

constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 16;
constexpr std::size_t kDepth = 256;

inline __m256i lane_mask(std::size_t count) {
  alignas(32) static const int table[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                            0,  0,  0,  0,  0,  0,  0,  0};
  return _mm256_loadu_si256(
      reinterpret_cast<const __m256i*>(table + 8 - std::min<std::size_t>(count, 8)));
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x1));
  return _mm_cvtss_f32(lo);
}

// c[R x cols] (+)= ap[kc x 4] * b[kc x cols]; ap is a packed panel holding
// kRows values per depth step, rows beyond R are ignored.
template <std::size_t R>
void micro_kernel(std::size_t kc, const float* ap, const float* b,
                  std::size_t ldb, float* c, std::size_t ldc, std::size_t cols,
                  bool accumulate) {
  __m256 acc0[R], acc1[R];
  for (std::size_t r = 0; r < R; ++r) {
    acc0[r] = _mm256_setzero_ps();
    acc1[r] = _mm256_setzero_ps();
  }
  if (cols == kCols) {
    for (std::size_t p = 0; p < kc; ++p) {
      const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
      const __m256 b1 = _mm256_loadu_ps(b + p * ldb + 8);
      for (std::size_t r = 0; r < R; ++r) {
        const __m256 av = _mm256_broadcast_ss(ap + p * kRows + r);
        acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
        acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
      }
    }
    for (std::size_t r = 0; r < R; ++r) {
      float* row = c + r * ldc;
      if (accumulate) {
        acc0[r] = _mm256_add_ps(acc0[r], _mm256_loadu_ps(row));
        acc1[r] = _mm256_add_ps(acc1[r], _mm256_loadu_ps(row + 8));
      }
      _mm256_storeu_ps(row, acc0[r]);
      _mm256_storeu_ps(row + 8, acc1[r]);
    }
    return;
  }
  const __m256i m0 = lane_mask(cols);
  const __m256i m1 = lane_mask(cols > 8 ? cols - 8 : 0);
  for (std::size_t p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_maskload_ps(b + p * ldb, m0);
    const __m256 b1 = _mm256_maskload_ps(b + p * ldb + 8, m1);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(ap + p * kRows + r);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    float* row = c + r * ldc;
    if (accumulate) {
      acc0[r] = _mm256_add_ps(acc0[r], _mm256_maskload_ps(row, m0));
      acc1[r] = _mm256_add_ps(acc1[r], _mm256_maskload_ps(row + 8, m1));
    }
    _mm256_maskstore_ps(row, m0, acc0[r]);
    _mm256_maskstore_ps(row + 8, m1, acc1[r]);
  }
}

using MicroFn = void (*)(std::size_t, const float*, const float*, std::size_t,
                         float*, std::size_t, std::size_t, bool);

constexpr MicroFn kMicro[kRows + 1] = {nullptr, micro_kernel<1>,
                                       micro_kernel<2>, micro_kernel<3>,
                                       micro_kernel<4>};

constexpr std::size_t kColBlock = 256;

// C = A * B^T with A (m x k) and B (n x k) both row-major: every output is a
// dot product of two contiguous rows, so no packing is needed. Blocks of
// 2 x 4 outputs share their loads.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  const std::size_t kv = k & ~std::size_t{7};
  auto finish = [&](std::size_t i, std::size_t j, __m256 acc, const float* ar, const float* br) {
    float v = hsum(acc);
    for (std::size_t p = kv; p < k; ++p) v += ar[p] * br[p];
    c[i * ldc + j] = accumulate ? c[i * ldc + j] + v : v;
  };
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* a0 = a + i * lda;
    const float* a1 = a0 + lda;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const float* b0 = b + j * ldb;
      const float* b1 = b0 + ldb;
      const float* b2 = b1 + ldb;
      const float* b3 = b2 + ldb;
      __m256 s00 = _mm256_setzero_ps(), s01 = s00, s02 = s00, s03 = s00;
      __m256 s10 = s00, s11 = s00, s12 = s00, s13 = s00;
      for (std::size_t p = 0; p < kv; p += 8) {
        const __m256 x0 = _mm256_loadu_ps(a0 + p), x1 = _mm256_loadu_ps(a1 + p);
        const __m256 y0 = _mm256_loadu_ps(b0 + p), y1 = _mm256_loadu_ps(b1 + p);
        const __m256 y2 = _mm256_loadu_ps(b2 + p), y3 = _mm256_loadu_ps(b3 + p);
        s00 = _mm256_fmadd_ps(x0, y0, s00);
        s01 = _mm256_fmadd_ps(x0, y1, s01);
        s02 = _mm256_fmadd_ps(x0, y2, s02);
        s03 = _mm256_fmadd_ps(x0, y3, s03);
        s10 = _mm256_fmadd_ps(x1, y0, s10);
        s11 = _mm256_fmadd_ps(x1, y1, s11);
        s12 = _mm256_fmadd_ps(x1, y2, s12);
        s13 = _mm256_fmadd_ps(x1, y3, s13);
      }
      finish(i, j, s00, a0, b0);
      finish(i, j + 1, s01, a0, b1);
      finish(i, j + 2, s02, a0, b2);
      finish(i, j + 3, s03, a0, b3);
      finish(i + 1, j, s10, a1, b0);
      finish(i + 1, j + 1, s11, a1, b1);
      finish(i + 1, j + 2, s12, a1, b2);
      finish(i + 1, j + 3, s13, a1, b3);
    }
    for (; j < n; ++j) {
      const float* br = b + j * ldb;
      __m256 s0 = _mm256_setzero_ps(), s1 = s0;
      for (std::size_t p = 0; p < kv; p += 8) {
        const __m256 y = _mm256_loadu_ps(br + p);
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a0 + p), y, s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a1 + p), y, s1);
      }
      finish(i, j, s0, a0, br);
      finish(i + 1, j, s1, a1, br);
    }
  }
  for (; i < m; ++i) {
    const float* ar = a + i * lda;
    for (std::size_t j = 0; j < n; ++j) {
      const float* br = b + j * ldb;
      __m256 s = _mm256_setzero_ps();
      for (std::size_t p = 0; p < kv; p += 8) {
        s = _mm256_fmadd_ps(_mm256_loadu_ps(ar + p), _mm256_loadu_ps(br + p), s);
      }
      finish(i, j, s, ar, br);
    }
  }
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const float* a, std::size_t lda, const float* b, std::size_t ldb,
          float* c, std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, 0.0f);
    }
    return;
  }
  if (ta == Trans::No && tb == Trans::Yes) {
    gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  thread_local std::vector<float> bt;
  thread_local std::vector<float> panels;

  // Transposed B is packed once into a k x n row-major buffer.
  if (tb == Trans::Yes) {
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      const float* src = b + j * ldb;
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = src[p];
    }
    b = bt.data();
    ldb = n;
  }
  const std::size_t npanels = (m + kRows - 1) / kRows;
  panels.resize(npanels * kDepth * kRows);

  for (std::size_t p0 = 0; p0 < k; p0 += kDepth) {
    const std::size_t kc = std::min(kDepth, k - p0);
    const bool acc = accumulate || p0 > 0;
    for (std::size_t i0 = 0; i0 < m; i0 += kRows) {
      const std::size_t rows = std::min(kRows, m - i0);
      float* panel = panels.data() + (i0 / kRows) * kDepth * kRows;
      for (std::size_t p = 0; p < kc; ++p) {
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t i = i0 + r, q = p0 + p;
          panel[p * kRows + r] = ta == Trans::No ? a[i * lda + q] : a[q * lda + i];
        }
      }
    }
    const float* bp = b + p0 * ldb;
    // Column blocks keep the kc x kColBlock slice of B cache resident while
    // every row panel passes over it.
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t jend = std::min(n, jb + kColBlock);
      for (std::size_t i0 = 0; i0 < m; i0 += kRows) {
        const std::size_t rows = std::min(kRows, m - i0);
        const float* panel = panels.data() + (i0 / kRows) * kDepth * kRows;
        for (std::size_t j0 = jb; j0 < jend; j0 += kCols) {
          const std::size_t cols = std::min(kCols, jend - j0);
          kMicro[rows](kc, panel, bp + j0, ldb, c + i0 * ldc + j0, ldc, cols, acc);
        }
      }
    }
  }
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

float dot(std::size_t n, const float* x, const float* y) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8),
                           _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void mul(std::size_t n, const float* x, const float* y, float* out) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i,
                     _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void relu(std::size_t n, const float* x, float* y) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(std::size_t n, const float* y, const float* g, float* dx) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 keep = _mm256_cmp_ps(_mm256_loadu_ps(y + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(dx + i, _mm256_and_ps(keep, _mm256_loadu_ps(g + i)));
  }
  for (; i < n; ++i) dx[i] = y[i] > 0.0f ? g[i] : 0.0f;
}

void sgd_momentum(std::size_t n, float lr, float momentum, float wd,
                  const float* g, float* v, float* w) {
  const __m256 vmu = _mm256_set1_ps(momentum);
  const __m256 vwd = _mm256_set1_ps(wd);
  const __m256 vlr = _mm256_set1_ps(lr);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 wv = _mm256_loadu_ps(w + i);
    // Same association as the scalar form: (mu*v + g) + wd*w.
    __m256 vv = _mm256_add_ps(
        _mm256_add_ps(_mm256_mul_ps(vmu, _mm256_loadu_ps(v + i)),
                      _mm256_loadu_ps(g + i)),
        _mm256_mul_ps(vwd, wv));
    _mm256_storeu_ps(v + i, vv);
    _mm256_storeu_ps(w + i, _mm256_sub_ps(wv, _mm256_mul_ps(vlr, vv)));
  }
  for (; i < n; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * w[i];
    w[i] -= lr * v[i];
  }
}

void split_signs(std::size_t n, const float* x, float* pos, float* neg) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(pos + i, _mm256_max_ps(xv, zero));
    _mm256_storeu_ps(neg + i, _mm256_min_ps(xv, zero));
  }
  for (; i < n; ++i) {
    pos[i] = std::max(x[i], 0.0f);
    neg[i] = std::min(x[i], 0.0f);
  }
}

void stable_divide(std::size_t n, const float* num, const float* den,
                   float eps, float* out) {
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 abs_mask = _mm256_castsi256_ps(_mm256_set1_epi32(0x7fffffff));
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 d = _mm256_loadu_ps(den + i);
    const __m256 keep = _mm256_cmp_ps(_mm256_and_ps(d, abs_mask), veps, _CMP_GE_OQ);
    // Guarded lanes divide by one so no Inf/NaN is ever formed.
    const __m256 safe = _mm256_blendv_ps(one, d, keep);
    const __m256 q = _mm256_div_ps(_mm256_loadu_ps(num + i), safe);
    _mm256_storeu_ps(out + i, _mm256_and_ps(keep, q));
  }
  for (; i < n; ++i) out[i] = std::fabs(den[i]) < eps ? 0.0f : num[i] / den[i];
}

}  // namespace

const Kernels& avx2_kernels() {
  static const Kernels k{Isa::Avx2,    gemm,         axpy,
                         dot,          mul,          relu,
                         relu_backward, sgd_momentum, split_signs,
                         stable_divide};
  return k;
}

}  // namespace frsp::simd::detail
