#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "frsp/config.hpp"
#include "frsp/cost.hpp"
#include "frsp/data.hpp"
#include "frsp/model.hpp"
#include "frsp/optim.hpp"
#include "frsp/scoring.hpp"

namespace frsp {

struct PruneSchedule {
  std::size_t epochs = 0;    // N
  std::size_t until = 0;     // N1
  std::size_t every = 1;     // n
  std::size_t channels = 0;  // x

  /// int(N1 / n)
  std::size_t k() const noexcept { return every ? until / every : 0; }
  /// 1-based epochs e <= N with e % n == 0 and e < N1.
  std::vector<std::size_t> event_epochs() const;
  std::size_t planned_removals() const { return event_epochs().size() * channels; }
};

bool should_prune(std::size_t epoch, const PruneSchedule& schedule);

struct LrSchedule {
  float initial = 0.1f;
  std::vector<std::size_t> milestones;
  float divisor = 10.0f;

  /// Rate for 1-based `epoch`: divided once for every milestone already
  /// passed, so epochs 1..m use the rate before milestone m.
  float rate(std::size_t epoch) const;
};

/// One shuffled pass; returns the mean training loss.
double train_epoch(ModelGraph& model, OptimState& optim, const Dataset& data,
                   std::size_t batch, std::mt19937_64& rng, std::size_t crop_pad = 0,
                   bool flip = false);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;
};

/// Throws std::invalid_argument on an empty dataset.
EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch = 256);

struct EpochRecord {
  std::size_t epoch = 0;
  float lr = 0.0f;
  double train_loss = 0.0;
  double test_acc = 0.0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  bool event = false;
  double train_seconds = 0.0;
};

struct PruneEvent {
  std::size_t epoch = 0;
  bool executed = false;
  std::string failure;  // set when the event was skipped
  std::vector<ChannelRef> victims;
  std::vector<float> victim_scores;
  std::uint64_t params_after = 0;
  std::uint64_t flops_after = 0;
  cost::EffortReport effort;
};

struct RunResult {
  ModelGraph model;
  OptimState optim;
  std::vector<EpochRecord> history;
  std::vector<PruneEvent> events;
  std::uint64_t baseline_params = 0;
  std::uint64_t baseline_flops = 0;
};

struct RunHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const PruneEvent&)> on_event;
};

/// Gradual pruning while training. Writes metrics.csv, events.csv,
/// timing.csv and (when enabled) checkpoints under cfg.out_dir unless
/// `write_outputs` is false.
RunResult run(const RunConfig& cfg, const DataSplits& data, bool write_outputs = true,
              const RunHooks& hooks = {});

struct CompareRow {
  std::string criterion;  // "baseline" for x = 0
  std::uint64_t seed = 0;
  double final_acc = 0.0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::size_t removed = 0;
};

/// The baseline (x = 0) plus every criterion, each on every seed, at the
/// configured schedule. Outputs of each run go under out_dir/<criterion>_s<seed>.
std::vector<CompareRow> run_comparison(const RunConfig& cfg, const DataSplits& data,
                                       const std::vector<scoring::Criterion>& criteria,
                                       const std::vector<std::uint64_t>& seeds,
                                       bool write_outputs = true, const RunHooks& hooks = {});

std::string compare_csv(const std::vector<CompareRow>& rows);

}  // namespace frsp
