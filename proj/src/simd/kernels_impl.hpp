#pragma once

#include "frsp/simd.hpp"

namespace frsp::simd::detail {

const Kernels& scalar_kernels();
#if defined(FRSP_HAVE_AVX2)
const Kernels& avx2_kernels();
#endif
#if defined(FRSP_HAVE_NEON)
const Kernels& neon_kernels();
#endif

// Reference gemm, shared with vector variants for degenerate shapes.
void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float* c, std::size_t ldc,
                 bool accumulate);

}  // namespace frsp::simd::detail
