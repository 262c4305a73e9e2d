#pragma once

// Runtime-dispatched numeric kernels. Every entry has a scalar reference
// implementation; vector variants (AVX2+FMA on x86-64, NEON on aarch64)
// are selected at first use from the CPU's capabilities and must agree with
// the reference up to floating-point reassociation.
//
// The FRSP_ISA environment variable (scalar | avx2 | neon) overrides the
// automatic choice.

#include <cstddef>
#include <string_view>
#include <vector>

namespace frsp::simd {

enum class Isa { Scalar, Avx2, Neon };
enum class Trans { No, Yes };

std::string_view isa_name(Isa isa);

struct Kernels {
  Isa isa;

  // C[m x n] = op(A) * op(B) (+ C when accumulate), all row-major.
  // op(A) is m x k: A is m x k when ta == No, else k x m.
  void (*gemm)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
               const float* a, std::size_t lda, const float* b,
               std::size_t ldb, float* c, std::size_t ldc, bool accumulate);

  void (*axpy)(std::size_t n, float alpha, const float* x, float* y);
  float (*dot)(std::size_t n, const float* x, const float* y);
  void (*mul)(std::size_t n, const float* x, const float* y, float* out);

  void (*relu)(std::size_t n, const float* x, float* y);
  // dx = g where y > 0, else 0.
  void (*relu_backward)(std::size_t n, const float* y, const float* g,
                        float* dx);

  // v = momentum * v + g + wd * w;  w -= lr * v
  void (*sgd_momentum)(std::size_t n, float lr, float momentum, float wd,
                       const float* g, float* v, float* w);

  // pos = max(x, 0), neg = min(x, 0)
  void (*split_signs)(std::size_t n, const float* x, float* pos, float* neg);

  // out = |den| < eps ? 0 : num / den
  void (*stable_divide)(std::size_t n, const float* num, const float* den,
                        float eps, float* out);
};

/// Kernels chosen for this process.
const Kernels& active();

/// The kernel set for `isa`, or nullptr when this build/CPU cannot run it.
const Kernels* kernels_for(Isa isa);

/// Overrides the active kernel set. Throws std::invalid_argument when the
/// requested ISA is unavailable.
void select(Isa isa);

/// Best ISA supported by the running CPU.
Isa detect();

/// Every ISA runnable here, scalar first.
std::vector<Isa> available();

}  // namespace frsp::simd
