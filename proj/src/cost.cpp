#include "frsp/cost.hpp"

#include <stdexcept>

namespace frsp::cost {

namespace {

std::uint64_t numel(const Shape& s) { return shape_numel(s); }

std::uint64_t affine_macs(const ModelGraph& model, const Layer& l) {
  const LayerSpec& s = l.spec;
  if (s.kind == LayerKind::Conv) {
    const Shape& in = model.shape_of(s.inputs[0]);
    return std::uint64_t(s.kernel) * s.kernel * in[0] * numel(l.out_shape);
  }
  return numel(model.shape_of(s.inputs[0])) * s.out_channels;
}

}  // namespace

CostReport count_costs(const ModelGraph& model) {
  CostReport r;
  for (const Layer& l : model.layers()) {
    LayerCost c{l.spec.id, l.spec.kind, 0, 0};
    const Shape& in = model.shape_of(l.spec.inputs[0]);
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear:
        c.params = l.weight.size() + l.bias.size();
        c.flops = affine_macs(model, l);
        break;
      case LayerKind::BatchNorm:
        c.params = l.weight.size() + l.bias.size();
        c.flops = numel(in);
        break;
      case LayerKind::Relu:
      case LayerKind::MaxPool:
      case LayerKind::GlobalAvgPool:
      case LayerKind::Add:
        c.flops = numel(in);
        break;
    }
    r.params += c.params;
    r.flops += c.flops;
    r.layers.push_back(c);
  }
  return r;
}

std::uint64_t relevance_sweep_flops(const ModelGraph& model, const lrp::LrpConfig& cfg) {
  // nonneg[id + 1]: the layer's output can never be negative.
  std::vector<char> nonneg(model.size() + 1, 0);
  for (const Layer& l : model.layers()) {
    const int src = l.spec.inputs[0];
    const bool in_nonneg = nonneg[static_cast<std::size_t>(src + 1)] != 0;
    const LayerKind k = l.spec.kind;
    nonneg[static_cast<std::size_t>(l.spec.id + 1)] =
        k == LayerKind::Relu ||
        ((k == LayerKind::MaxPool || k == LayerKind::GlobalAvgPool) && in_nonneg);
  }
  const std::uint64_t base = cfg.beta() != 0.0f ? 4 : 2;
  std::uint64_t total = 0;
  for (const Layer& l : model.layers()) {
    const int src = l.spec.inputs[0];
    if (src == kModelInput) continue;
    const std::uint64_t passes = nonneg[static_cast<std::size_t>(src + 1)] ? base : 2 * base;
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear:
        total += passes * affine_macs(model, l);
        break;
      case LayerKind::GlobalAvgPool:
        total += passes * numel(model.shape_of(src));
        break;
      default:
        break;
    }
  }
  return total;
}

EffortReport effort_factor(std::uint64_t scoring_flops, std::uint64_t forward_flops_per_sample,
                           std::size_t train_size, double search_seconds) {
  if (forward_flops_per_sample == 0 || train_size == 0) {
    throw std::invalid_argument("effort_factor: epoch FLOPs must be positive");
  }
  EffortReport e;
  e.scoring_flops = scoring_flops;
  e.epoch_flops = 3 * forward_flops_per_sample * train_size;
  e.rho = double(scoring_flops) / double(e.epoch_flops);
  e.search_seconds = search_seconds;
  return e;
}

EffortReport analytic_effort(const ModelGraph& model, const lrp::LrpConfig& cfg,
                             std::size_t scoring_samples, std::size_t train_size) {
  const std::uint64_t fwd = count_flops(model);
  const std::uint64_t per_sample = fwd + relevance_sweep_flops(model, cfg);
  return effort_factor(per_sample * scoring_samples, fwd, train_size);
}

double percent_drop(std::uint64_t before, std::uint64_t after) {
  if (before == 0) throw std::invalid_argument("percent_drop: baseline is zero");
  return 100.0 * (1.0 - double(after) / double(before));
}

}  // namespace frsp::cost
