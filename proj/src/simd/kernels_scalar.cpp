#include <algorithm>
#include <cmath>

#include "kernels_impl.hpp"

namespace frsp::simd::detail {

void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float* c, std::size_t ldc,
                 bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = accumulate ? c[i * ldc + j] : 0.0f;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ta == Trans::No ? a[i * lda + p] : a[p * lda + i];
        const float bv = tb == Trans::No ? b[p * ldb + j] : b[j * ldb + p];
        acc += av * bv;
      }
      c[i * ldc + j] = acc;
    }
  }
}

namespace {

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

float dot(std::size_t n, const float* x, const float* y) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void mul(std::size_t n, const float* x, const float* y, float* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void relu(std::size_t n, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(std::size_t n, const float* y, const float* g, float* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = y[i] > 0.0f ? g[i] : 0.0f;
}

void sgd_momentum(std::size_t n, float lr, float momentum, float wd,
                  const float* g, float* v, float* w) {
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * w[i];
    w[i] -= lr * v[i];
  }
}

void split_signs(std::size_t n, const float* x, float* pos, float* neg) {
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = std::max(x[i], 0.0f);
    neg[i] = std::min(x[i], 0.0f);
  }
}

void stable_divide(std::size_t n, const float* num, const float* den,
                   float eps, float* out) {
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::fabs(den[i]) < eps ? 0.0f : num[i] / den[i];
  }
}

}  // namespace

const Kernels& scalar_kernels() {
  static const Kernels k{Isa::Scalar, gemm_scalar,   axpy,
                         dot,         mul,           relu,
                         relu_backward, sgd_momentum, split_signs,
                         stable_divide};
  return k;
}

}  // namespace frsp::simd::detail
