#pragma once

#include <cstdint>

namespace frsp {

// Per-thread count of arithmetic work executed by the ops layer, under the
// same convention as the analytic counters: one multiply-accumulate is one
// FLOP, elementwise layers cost one per element processed.
class FlopCounter {
 public:
  static void add(std::uint64_t n) noexcept;
  static std::uint64_t read() noexcept;
  static void reset() noexcept;
};

/// Measures FLOPs executed between construction and elapsed().
class FlopScope {
 public:
  FlopScope() noexcept : start_(FlopCounter::read()) {}
  std::uint64_t elapsed() const noexcept { return FlopCounter::read() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace frsp
