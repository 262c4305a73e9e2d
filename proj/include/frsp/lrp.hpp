#pragma once

// Layer-wise relevance propagation with the alpha-beta rule.
//
// For an affine map z_q = sum_p a_p w_pq the relevance of input p is
//
//   R_p = sum_q ( alpha * (a_p w_pq)+ / sum_p (a_p w_pq)+
//               - beta  * (a_p w_pq)- / sum_p (a_p w_pq)- ) * R_q
//
// with alpha - beta = 1. Each fraction is taken as 0 when its denominator
// magnitude is below eps. Biases never receive relevance.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "frsp/model.hpp"
#include "frsp/tensor.hpp"

namespace frsp::lrp {

enum class PoolRule { WinnerTakeAll, Proportional };
enum class BnHandling { Fold, Identity };

class LrpConfig {
 public:
  /// Throws std::invalid_argument unless alpha - beta == 1 and beta >= 0.
  explicit LrpConfig(float alpha = 2.0f, float beta = 1.0f, float eps = 1e-9f,
                     PoolRule pool = PoolRule::WinnerTakeAll,
                     BnHandling bn = BnHandling::Fold);

  float alpha() const noexcept { return alpha_; }
  float beta() const noexcept { return beta_; }
  float eps() const noexcept { return eps_; }
  PoolRule pool_rule() const noexcept { return pool_; }
  BnHandling bn_handling() const noexcept { return bn_; }

 private:
  float alpha_, beta_, eps_;
  PoolRule pool_;
  BnHandling bn_;
};

struct RelevanceMap {
  Tensor input;                // relevance on the model input (may be empty)
  std::vector<Tensor> layers;  // relevance on each layer's output, by id
  // Output nodes that carried relevance but had a denominator below eps.
  std::size_t clamped = 0;
};

/// Kronecker delta on the true class.
std::vector<float> init_output_relevance(int label, std::size_t classes);

/// Linear step. activations (B, ...) flatten to (B, in); weight (out, in);
/// upstream (B, out). Result has the activations' shape.
Tensor relevance_backward_linear(const Tensor& activations, const Tensor& weight,
                                 const Tensor& upstream, const LrpConfig& cfg,
                                 std::size_t* clamped = nullptr);

/// Conv step, the same rule applied to the conv's affine unrolling.
Tensor relevance_backward_conv(const Tensor& activations, const Tensor& weight,
                               ops::ConvGeometry geometry, const Tensor& upstream,
                               const LrpConfig& cfg, std::size_t* clamped = nullptr);

inline Tensor relevance_through_relu(const Tensor& r) { return r; }

/// activations are the pool inputs; only the proportional rule reads them.
Tensor relevance_through_maxpool(const Tensor& upstream,
                                 std::span<const std::uint32_t> argmax,
                                 const Tensor& activations, const LrpConfig& cfg);

/// Global average pooling as an affine map with weights 1 / (H W).
Tensor relevance_through_gap(const Tensor& upstream, const Tensor& activations,
                             const LrpConfig& cfg, std::size_t* clamped = nullptr);

/// Conv weights with the following eval-mode batch norm's per-channel scale
/// folded in.
Tensor fold_batchnorm(const Tensor& conv_weight, const Layer& bn);

/// Relevance at a conv's input when the conv is followed by `bn`: with
/// BnHandling::Fold the bn scale is folded into the conv weights first,
/// with Identity the bn is ignored.
Tensor relevance_through_bn(const Tensor& upstream, const Tensor& conv_input,
                            const Layer& conv, const Layer& bn,
                            const LrpConfig& cfg, std::size_t* clamped = nullptr);

/// Splits relevance over the two summands in proportion to their values;
/// positions whose sum is below eps in magnitude split evenly.
std::pair<Tensor, Tensor> relevance_through_add(const Tensor& upstream,
                                                const Tensor& a, const Tensor& b,
                                                float eps);

/// One backward sweep from the output layer to every layer.
/// `labels` holds the true class per sample of the traced batch. When
/// `to_input` is false the step into the model input is skipped.
/// Throws std::logic_error when the trace predates a model mutation.
RelevanceMap full_relevance_pass(const ModelGraph& model, const ActivationTrace& trace,
                                 std::span<const int> labels, const LrpConfig& cfg,
                                 bool to_input = true);

}  // namespace frsp::lrp
