#pragma once

// Run configuration files. Grammar:
//
//   file    := { line }
//   line    := blank | comment | section | entry
//   comment := '#' ...
//   section := '[' name ']'        (arch | data | optim | prune | run)
//   entry   := key '=' value       (value runs to end of line or '#')
//
// Lists are comma separated. Every key may appear at most once per file;
// unknown sections or keys are errors. README.md lists every key.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "frsp/data.hpp"
#include "frsp/lrp.hpp"
#include "frsp/model.hpp"
#include "frsp/scoring.hpp"

namespace frsp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimConfig {
  float lr = 0.1f;
  std::vector<std::size_t> milestones{100, 150};
  float lr_divisor = 10.0f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  std::size_t batch = 256;
  std::size_t epochs = 200;  // N
};

struct PruneConfig {
  std::size_t until = 150;   // N1: no events at or after this epoch
  std::size_t every = 20;    // n
  std::size_t channels = 0;  // x per event
  scoring::Criterion criterion = scoring::Criterion::FeatureRelevance;
  float alpha = 2.0f;
  float beta = 1.0f;
  float eps = 1e-9f;
  lrp::PoolRule pool_rule = lrp::PoolRule::WinnerTakeAll;
  lrp::BnHandling bn_handling = lrp::BnHandling::Fold;
  scoring::Weighting weighting = scoring::Weighting::Accuracy;
  scoring::Ranking ranking = scoring::Ranking::Signed;
  std::size_t subset = 0;  // scoring samples; 0 = whole training set
  std::size_t score_batch = 64;

  lrp::LrpConfig lrp() const { return lrp::LrpConfig(alpha, beta, eps, pool_rule, bn_handling); }
};

struct RunConfig {
  ArchConfig arch;
  DatasetSpec data;
  OptimConfig optim;
  PruneConfig prune;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  bool checkpoints = true;
};

/// Throws ConfigError with "<source>:<line>: ..." messages.
RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>");
RunConfig parse_config_file(const std::string& path);

/// Checks cross-field constraints; parse_config_* already call it.
void validate(const RunConfig& cfg, const std::string& source = "<config>");

/// Full-scale ResNet-56 on CIFAR-10 settings.
RunConfig cifar_default();
/// Desk-scale profile: small CNN on synthetic 16x16 data, 30 epochs.
RunConfig toy_profile();

/// Serialized form accepted by parse_config_text (round trips).
std::string to_text(const RunConfig& cfg);

}  // namespace frsp
