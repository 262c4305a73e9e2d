#pragma once

// FRSP container, all integers little-endian:
//
//   "FRSP" u32 version
//   u32 len, architecture echo (key=value lines)
//   u32 len, RNG state text
//   u32 entry count, then per entry:
//     u32 name length, name, u8 dtype (0 = f32, 2 = i64), u32 rank,
//     rank x u64 dims, payload
//
// Entries: layer<id>.{weight,bias,running_mean,running_var},
// momentum<id>.{weight,bias}, epoch.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "frsp/model.hpp"
#include "frsp/optim.hpp"

namespace frsp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ArchConfig arch;
  ModelGraph model;
  OptimState optim;
  std::int64_t epoch = 0;
  std::string rng_state;
};

std::string arch_to_text(const ArchConfig& arch);
ArchConfig arch_from_text(const std::string& text);

void save_checkpoint(const std::string& path, const ArchConfig& arch, const ModelGraph& model,
                     const OptimState* optim, std::int64_t epoch,
                     const std::string& rng_state = {});

/// Rebuilds the architecture from the echo, prunes it to the stored shapes
/// and restores every tensor. Throws CheckpointError on bad magic, version
/// mismatch, truncation or shape disagreement.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace frsp
