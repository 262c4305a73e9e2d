#pragma once

#include <compare>
#include <map>
#include <span>

#include "frsp/tensor.hpp"

namespace frsp {

enum class ParamSlot { Weight = 0, Bias = 1 };

struct ParamKey {
  int layer = 0;
  ParamSlot slot = ParamSlot::Weight;
  auto operator<=>(const ParamKey&) const = default;
};

struct SgdHyper {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
};

/// Momentum buffers keyed by parameter; buffers are created lazily on the
/// first step and afterwards must track the parameter's shape exactly.
struct OptimState {
  SgdHyper hyper;
  std::map<ParamKey, Tensor> momentum;
};

struct ParamGrad {
  ParamKey key;
  Tensor* param;
  const Tensor* grad;
};

/// v <- mu*v + g + wd*w ; w <- w - lr*v.
/// Throws ShapeError when a stored buffer no longer matches its parameter,
/// which means a surgery step skipped the optimizer.
void sgd_step(std::span<const ParamGrad> params, OptimState& state);

}  // namespace frsp
