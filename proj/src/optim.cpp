#include "frsp/optim.hpp"

#include <string>

#include "frsp/simd.hpp"

namespace frsp {

void sgd_step(std::span<const ParamGrad> params, OptimState& state) {
  // Validate everything before touching any parameter.
  for (const ParamGrad& p : params) {
    require_shape(*p.grad, p.param->shape(), "sgd_step gradient");
    auto it = state.momentum.find(p.key);
    if (it != state.momentum.end() && it->second.shape() != p.param->shape()) {
      throw ShapeError("sgd_step: momentum buffer for layer " +
                       std::to_string(p.key.layer) + " has shape " +
                       shape_str(it->second.shape()) + " but parameter is " +
                       shape_str(p.param->shape()));
    }
  }
  const auto& k = simd::active();
  const SgdHyper& h = state.hyper;
  for (const ParamGrad& p : params) {
    auto [it, inserted] = state.momentum.try_emplace(p.key, p.param->shape());
    k.sgd_momentum(p.param->size(), h.lr, h.momentum, h.weight_decay,
                   p.grad->data(), it->second.data(), p.param->data());
    require_finite(*p.param, "sgd_step");
  }
}

}  // namespace frsp
