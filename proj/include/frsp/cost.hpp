#pragma once

// Parameter and FLOP accounting. One multiply-accumulate counts as one FLOP;
// batch norm, relu, pooling and add cost one FLOP per input element. These
// are the same rules the ops layer uses to feed FlopCounter, so a measured
// forward pass matches count_costs() exactly.

#include <cstdint>
#include <vector>

#include "frsp/lrp.hpp"
#include "frsp/model.hpp"

namespace frsp::cost {

struct LayerCost {
  int layer = 0;
  LayerKind kind = LayerKind::Relu;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // per sample
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // per forward sample
  std::vector<LayerCost> layers;
};

/// Trainable scalars and forward FLOPs for one sample at the model's input shape.
CostReport count_costs(const ModelGraph& model);

inline std::uint64_t count_params(const ModelGraph& model) { return count_costs(model).params; }
inline std::uint64_t count_flops(const ModelGraph& model) { return count_costs(model).flops; }

/// FLOPs of one relevance sweep for one sample, counting the affine passes
/// the alpha-beta rule performs: z+ and its transpose, the z- pair when beta
/// is nonzero, each doubled for layers whose input can be negative. The step
/// into the model input is skipped, as in scoring.
std::uint64_t relevance_sweep_flops(const ModelGraph& model, const lrp::LrpConfig& cfg);

struct EffortReport {
  std::uint64_t scoring_flops = 0;  // forward + relevance over the scoring set
  std::uint64_t epoch_flops = 0;    // 3 x forward over the training set
  double rho = 0.0;
  double search_seconds = 0.0;
};

/// rho = scoring_flops / (3 * forward_flops_per_sample * train_size).
EffortReport effort_factor(std::uint64_t scoring_flops, std::uint64_t forward_flops_per_sample,
                           std::size_t train_size, double search_seconds = 0.0);

/// Effort predicted from the architecture alone for `scoring_samples`.
EffortReport analytic_effort(const ModelGraph& model, const lrp::LrpConfig& cfg,
                             std::size_t scoring_samples, std::size_t train_size);

/// 100 * (1 - after / before)
double percent_drop(std::uint64_t before, std::uint64_t after);

}  // namespace frsp::cost
