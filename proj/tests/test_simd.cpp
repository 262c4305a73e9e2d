#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "frsp/simd.hpp"

using namespace frsp::simd;

namespace {

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

const Kernels& scalar() { return *kernels_for(Isa::Scalar); }

// Every non-scalar kernel set available on this machine.
std::vector<const Kernels*> vector_sets() {
  std::vector<const Kernels*> out;
  for (Isa isa : available()) {
    if (isa != Isa::Scalar) out.push_back(kernels_for(isa));
  }
  return out;
}

}  // namespace

TEST(Simd, ScalarAlwaysAvailable) {
  const auto isas = available();
  ASSERT_FALSE(isas.empty());
  EXPECT_EQ(isas.front(), Isa::Scalar);
  EXPECT_NE(kernels_for(Isa::Scalar), nullptr);
  EXPECT_EQ(active().isa, detect());
}

TEST(Simd, SelectRejectsUnavailable) {
  for (Isa isa : {Isa::Avx2, Isa::Neon}) {
    if (kernels_for(isa) == nullptr) {
      EXPECT_THROW(select(isa), std::invalid_argument);
    }
  }
  const Isa before = active().isa;
  select(Isa::Scalar);
  EXPECT_EQ(active().isa, Isa::Scalar);
  select(before);
}

TEST(Simd, GemmAllTransposes) {
  std::mt19937_64 rng(1);
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 300, 72},
                                   {5, 513, 130}, {31, 7, 257}};
  for (const Kernels* k : vector_sets()) {
    for (const auto& s : shapes) {
      const std::size_t m = s[0], n = s[1], depth = s[2];
      for (Trans ta : {Trans::No, Trans::Yes}) {
        for (Trans tb : {Trans::No, Trans::Yes}) {
          for (bool acc : {false, true}) {
            const auto a = random_vec(m * depth, rng), b = random_vec(depth * n, rng);
            const auto c0 = random_vec(m * n, rng);
            const std::size_t lda = ta == Trans::No ? depth : m;
            const std::size_t ldb = tb == Trans::No ? n : depth;
            auto ref = c0, got = c0;
            scalar().gemm(ta, tb, m, n, depth, a.data(), lda, b.data(), ldb, ref.data(), n, acc);
            k->gemm(ta, tb, m, n, depth, a.data(), lda, b.data(), ldb, got.data(), n, acc);
            for (std::size_t i = 0; i < m * n; ++i) {
              ASSERT_NEAR(got[i], ref[i], 1e-4 * (1.0 + std::abs(ref[i])))
                  << isa_name(k->isa) << " m=" << m << " n=" << n << " k=" << depth;
            }
          }
        }
      }
    }
  }
}

TEST(Simd, GemmMatchesDefinition) {
  std::mt19937_64 rng(9);
  const std::size_t m = 6, n = 11, depth = 5;
  const auto a = random_vec(m * depth, rng), b = random_vec(depth * n, rng);
  std::vector<float> c(m * n);
  scalar().gemm(Trans::No, Trans::No, m, n, depth, a.data(), depth, b.data(), n, c.data(), n,
                false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < depth; ++p) s += double(a[i * depth + p]) * b[p * n + j];
      EXPECT_NEAR(c[i * n + j], s, 1e-5);
    }
}

TEST(Simd, ElementwiseKernelsAgree) {
  std::mt19937_64 rng(4);
  for (const Kernels* k : vector_sets()) {
    for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 31u, 1000u}) {
      const auto x = random_vec(n, rng), y = random_vec(n, rng);
      {
        auto r = y, g = y;
        scalar().axpy(n, 0.7f, x.data(), r.data());
        k->axpy(n, 0.7f, x.data(), g.data());
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(g[i], r[i], 1e-6);
      }
      EXPECT_NEAR(k->dot(n, x.data(), y.data()), scalar().dot(n, x.data(), y.data()),
                  1e-4 * (1.0 + n));
      {
        std::vector<float> r(n), g(n);
        scalar().mul(n, x.data(), y.data(), r.data());
        k->mul(n, x.data(), y.data(), g.data());
        EXPECT_EQ(r, g);
        scalar().relu(n, x.data(), r.data());
        k->relu(n, x.data(), g.data());
        EXPECT_EQ(r, g);
        scalar().relu_backward(n, x.data(), y.data(), r.data());
        k->relu_backward(n, x.data(), y.data(), g.data());
        EXPECT_EQ(r, g);
      }
      {
        std::vector<float> rp(n), rn(n), gp(n), gn(n);
        scalar().split_signs(n, x.data(), rp.data(), rn.data());
        k->split_signs(n, x.data(), gp.data(), gn.data());
        EXPECT_EQ(rp, gp);
        EXPECT_EQ(rn, gn);
      }
      {
        auto den = y;
        if (n > 2) den[1] = 1e-12f;
        std::vector<float> r(n), g(n);
        scalar().stable_divide(n, x.data(), den.data(), 1e-9f, r.data());
        k->stable_divide(n, x.data(), den.data(), 1e-9f, g.data());
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(g[i], r[i], 1e-6 * (1 + std::abs(r[i])));
        if (n > 2) {
          EXPECT_EQ(g[1], 0.0f);
        }
      }
      {
        auto rv = y, gv = y, rw = x, gw = x;
        const auto grad = random_vec(n, rng);
        scalar().sgd_momentum(n, 0.1f, 0.9f, 5e-4f, grad.data(), rv.data(), rw.data());
        k->sgd_momentum(n, 0.1f, 0.9f, 5e-4f, grad.data(), gv.data(), gw.data());
        for (std::size_t i = 0; i < n; ++i) {
          EXPECT_NEAR(gv[i], rv[i], 1e-6);
          EXPECT_NEAR(gw[i], rw[i], 1e-6);
        }
      }
    }
  }
}
