#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_impl.hpp"

namespace frsp::simd {
namespace {

bool cpu_has(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if defined(FRSP_HAVE_AVX2)
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::Neon:
#if defined(FRSP_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const Kernels* table_for(Isa isa) {
  if (!cpu_has(isa)) return nullptr;
  switch (isa) {
    case Isa::Scalar:
      return &detail::scalar_kernels();
    case Isa::Avx2:
#if defined(FRSP_HAVE_AVX2)
      return &detail::avx2_kernels();
#else
      return nullptr;
#endif
    case Isa::Neon:
#if defined(FRSP_HAVE_NEON)
      return &detail::neon_kernels();
#else
      return nullptr;
#endif
  }
  return nullptr;
}

Isa parse_isa(const std::string& name) {
  if (name == "scalar") return Isa::Scalar;
  if (name == "avx2") return Isa::Avx2;
  if (name == "neon") return Isa::Neon;
  throw std::invalid_argument("FRSP_ISA: unknown isa '" + name + "'");
}

const Kernels* initial() {
  if (const char* env = std::getenv("FRSP_ISA"); env && *env) {
    const Kernels* k = table_for(parse_isa(env));
    if (!k) {
      throw std::invalid_argument(std::string("FRSP_ISA: '") + env +
                                  "' is not supported on this CPU");
    }
    return k;
  }
  return table_for(detect());
}

std::atomic<const Kernels*>& current() {
  static std::atomic<const Kernels*> k{initial()};
  return k;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return "scalar";
    case Isa::Avx2:
      return "avx2";
    case Isa::Neon:
      return "neon";
  }
  return "?";
}

Isa detect() {
  if (cpu_has(Isa::Avx2)) return Isa::Avx2;
  if (cpu_has(Isa::Neon)) return Isa::Neon;
  return Isa::Scalar;
}

std::vector<Isa> available() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::Scalar, Isa::Avx2, Isa::Neon}) {
    if (table_for(isa)) out.push_back(isa);
  }
  return out;
}

const Kernels& active() { return *current().load(std::memory_order_acquire); }

const Kernels* kernels_for(Isa isa) { return table_for(isa); }

void select(Isa isa) {
  const Kernels* k = table_for(isa);
  if (!k) {
    throw std::invalid_argument("isa " + std::string(isa_name(isa)) +
                                " is not available");
  }
  current().store(k, std::memory_order_release);
}

}  // namespace frsp::simd
