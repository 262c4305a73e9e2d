#include "frsp/lrp.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "frsp/flops.hpp"
#include "frsp/simd.hpp"

namespace frsp::lrp {

LrpConfig::LrpConfig(float alpha, float beta, float eps, PoolRule pool, BnHandling bn)
    : alpha_(alpha), beta_(beta), eps_(eps), pool_(pool), bn_(bn) {
  if (!(beta >= 0.0f) || std::fabs((alpha - beta) - 1.0f) > 1e-6f) {
    throw std::invalid_argument("lrp: need alpha - beta == 1 and beta >= 0, got alpha=" +
                                std::to_string(alpha) + " beta=" + std::to_string(beta));
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("lrp: eps must be positive");
}

std::vector<float> init_output_relevance(int label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw std::out_of_range("init_output_relevance: label " + std::to_string(label) +
                            " outside [0, " + std::to_string(classes) + ")");
  }
  std::vector<float> r(classes, 0.0f);
  r[static_cast<std::size_t>(label)] = 1.0f;
  return r;
}

namespace {

struct Signs {
  Tensor pos, neg;
  bool has_neg = false;
};

Signs split(const Tensor& t) {
  Signs s{Tensor(t.shape()), Tensor(t.shape())};
  simd::active().split_signs(t.size(), t.data(), s.pos.data(), s.neg.data());
  for (float v : s.neg.values()) {
    if (v != 0.0f) {
      s.has_neg = true;
      break;
    }
  }
  return s;
}

Tensor sum(Tensor a, const Tensor& b) {
  simd::active().axpy(a.size(), 1.0f, b.data(), a.data());
  return a;
}

Tensor divide(const Tensor& num, const Tensor& den, float eps) {
  Tensor out(num.shape());
  simd::active().stable_divide(num.size(), num.data(), den.data(), eps, out.data());
  return out;
}

Tensor times(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  simd::active().mul(a.size(), a.data(), b.data(), out.data());
  return out;
}

std::size_t count_clamped(const Tensor& r, const Tensor& zp, const Tensor& zn,
                          const LrpConfig& cfg) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] == 0.0f) continue;
    if (std::fabs(zp[i]) < cfg.eps() ||
        (cfg.beta() != 0.0f && std::fabs(zn[i]) < cfg.eps())) {
      ++n;
    }
  }
  return n;
}

using Affine = std::function<Tensor(const Tensor& x, const Tensor& w)>;
using AffineT = std::function<Tensor(const Tensor& s, const Tensor& w)>;

// The alpha-beta rule for an arbitrary bias-free affine map given as a forward
// application f(x, W) and its transpose ft(s, W).
Tensor alpha_beta(const Tensor& a, const Tensor& weight, const Tensor& upstream,
                  const LrpConfig& cfg, const Affine& f, const AffineT& ft,
                  std::size_t* clamped) {
  const Signs as = split(a);
  const Signs ws = split(weight);
  const bool use_beta = cfg.beta() != 0.0f;

  Tensor zp = f(as.pos, ws.pos);
  if (as.has_neg) zp = sum(std::move(zp), f(as.neg, ws.neg));
  Tensor zn;
  if (use_beta) {
    zn = f(as.pos, ws.neg);
    if (as.has_neg) zn = sum(std::move(zn), f(as.neg, ws.pos));
  }
  if (clamped) *clamped += count_clamped(upstream, zp, zn, cfg);

  const Tensor sp = divide(upstream, zp, cfg.eps());
  Tensor out = times(as.pos, ft(sp, ws.pos));
  if (as.has_neg) out = sum(std::move(out), times(as.neg, ft(sp, ws.neg)));
  for (float& v : out.values()) v *= cfg.alpha();

  if (use_beta) {
    const Tensor sn = divide(upstream, zn, cfg.eps());
    Tensor neg = times(as.pos, ft(sn, ws.neg));
    if (as.has_neg) neg = sum(std::move(neg), times(as.neg, ft(sn, ws.pos)));
    simd::active().axpy(out.size(), -cfg.beta(), neg.data(), out.data());
  }
  return out;
}

}  // namespace

Tensor relevance_backward_linear(const Tensor& activations, const Tensor& weight,
                                 const Tensor& upstream, const LrpConfig& cfg,
                                 std::size_t* clamped) {
  if (weight.rank() != 2 || activations.rank() < 2 || upstream.rank() != 2) {
    throw ShapeError("relevance_backward_linear: bad ranks");
  }
  const std::size_t batch = activations.dim(0);
  if (activations.size() != batch * weight.dim(1) ||
      upstream.shape() != Shape{batch, weight.dim(0)}) {
    throw ShapeError("relevance_backward_linear: activations " +
                     shape_str(activations.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", upstream " +
                     shape_str(upstream.shape()));
  }
  const Shape in_shape = activations.shape();
  return alpha_beta(
      activations, weight, upstream, cfg,
      [](const Tensor& x, const Tensor& w) { return ops::linear_forward(x, w, nullptr); },
      [&](const Tensor& s, const Tensor& w) {
        return ops::linear_backward_input(s, w, in_shape);
      },
      clamped);
}

Tensor relevance_backward_conv(const Tensor& activations, const Tensor& weight,
                               ops::ConvGeometry geometry, const Tensor& upstream,
                               const LrpConfig& cfg, std::size_t* clamped) {
  const Shape expect = ops::conv2d_output_shape(activations.shape(), weight.shape(), geometry);
  require_shape(upstream, expect, "relevance_backward_conv upstream");
  const Shape in_shape = activations.shape();
  return alpha_beta(
      activations, weight, upstream, cfg,
      [&](const Tensor& x, const Tensor& w) {
        return ops::conv2d_forward(x, w, nullptr, geometry);
      },
      [&](const Tensor& s, const Tensor& w) {
        return ops::conv2d_backward_input(s, w, in_shape, geometry);
      },
      clamped);
}

Tensor relevance_through_maxpool(const Tensor& upstream,
                                 std::span<const std::uint32_t> argmax,
                                 const Tensor& activations, const LrpConfig& cfg) {
  if (argmax.size() != upstream.size()) {
    throw std::invalid_argument("relevance_through_maxpool: missing argmax records (" +
                                std::to_string(argmax.size()) + " for " +
                                std::to_string(upstream.size()) + " outputs)");
  }
  if (upstream.rank() != 4 || activations.rank() != 4 ||
      activations.dim(0) != upstream.dim(0) || activations.dim(1) != upstream.dim(1) ||
      activations.dim(2) / 2 != upstream.dim(2) || activations.dim(3) / 2 != upstream.dim(3)) {
    throw ShapeError("relevance_through_maxpool: upstream " + shape_str(upstream.shape()) +
                     " does not pool from " + shape_str(activations.shape()));
  }
  if (cfg.pool_rule() == PoolRule::WinnerTakeAll) {
    return ops::maxpool2_backward(upstream, argmax, activations.shape());
  }
  const std::size_t planes = upstream.dim(0) * upstream.dim(1);
  const std::size_t h = activations.dim(2), w = activations.dim(3);
  const std::size_t ho = upstream.dim(2), wo = upstream.dim(3);
  Tensor out(activations.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* a = activations.data() + p * h * w;
    const float* r = upstream.data() + p * ho * wo;
    float* o = out.data() + p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const std::size_t q = oh * wo + ow;
        const std::size_t base = (2 * oh) * w + 2 * ow;
        const std::size_t at[4] = {base, base + 1, base + w, base + w + 1};
        float total = 0.0f;
        for (std::size_t i : at) total += a[i];
        if (std::fabs(total) < cfg.eps()) {
          o[argmax[p * ho * wo + q]] += r[q];
          continue;
        }
        for (std::size_t i : at) o[i] += a[i] / total * r[q];
      }
    }
  }
  return out;
}

Tensor relevance_through_gap(const Tensor& upstream, const Tensor& activations,
                             const LrpConfig& cfg, std::size_t* clamped) {
  if (activations.rank() != 4 ||
      upstream.shape() != Shape{activations.dim(0), activations.dim(1), 1, 1}) {
    throw ShapeError("relevance_through_gap: upstream " + shape_str(upstream.shape()) +
                     " vs activations " + shape_str(activations.shape()));
  }
  // Every weight is the positive constant 1 / area, so the positive part of
  // each contribution comes from a+ and the negative part from a-; the
  // constant cancels inside each fraction.
  const std::size_t planes = activations.dim(0) * activations.dim(1);
  const std::size_t area = activations.dim(2) * activations.dim(3);
  const bool use_beta = cfg.beta() != 0.0f;
  Tensor out(activations.shape());
  bool any_neg = false;
  for (std::size_t p = 0; p < planes; ++p) {
    const float* a = activations.data() + p * area;
    float* o = out.data() + p * area;
    const float r = upstream[p];
    float zp = 0.0f, zn = 0.0f;
    for (std::size_t i = 0; i < area; ++i) {
      if (a[i] > 0.0f) zp += a[i];
      else if (a[i] < 0.0f) zn += a[i];
    }
    any_neg = any_neg || zn != 0.0f;
    if (clamped && r != 0.0f &&
        (std::fabs(zp) < cfg.eps() || (use_beta && std::fabs(zn) < cfg.eps()))) {
      ++*clamped;
    }
    const float sp = std::fabs(zp) < cfg.eps() ? 0.0f : cfg.alpha() * r / zp;
    const float sn = !use_beta || std::fabs(zn) < cfg.eps() ? 0.0f : cfg.beta() * r / zn;
    for (std::size_t i = 0; i < area; ++i) {
      o[i] = a[i] > 0.0f ? a[i] * sp : a[i] < 0.0f ? -a[i] * sn : 0.0f;
    }
  }
  // Same pass count the affine rule performs: z+ and its transpose, the z-
  // pair when beta is active, doubled for signed inputs.
  std::uint64_t passes = use_beta ? 4 : 2;
  if (any_neg) passes *= 2;
  FlopCounter::add(passes * activations.size());
  return out;
}

Tensor fold_batchnorm(const Tensor& conv_weight, const Layer& bn) {
  if (bn.spec.kind != LayerKind::BatchNorm) {
    throw std::invalid_argument("fold_batchnorm: layer " + std::to_string(bn.spec.id) +
                                " is not a batch norm");
  }
  if (conv_weight.rank() != 4 || conv_weight.dim(0) != bn.weight.size()) {
    throw ShapeError("fold_batchnorm: conv weight " + shape_str(conv_weight.shape()) +
                     " vs bn channels " + std::to_string(bn.weight.size()));
  }
  Tensor w = conv_weight;
  const std::size_t per = w.size() / w.dim(0);
  for (std::size_t c = 0; c < w.dim(0); ++c) {
    const float scale = bn.weight[c] / std::sqrt(bn.running_var[c] + ops::kBnEps);
    for (std::size_t i = 0; i < per; ++i) w[c * per + i] *= scale;
  }
  return w;
}

Tensor relevance_through_bn(const Tensor& upstream, const Tensor& conv_input,
                            const Layer& conv, const Layer& bn, const LrpConfig& cfg,
                            std::size_t* clamped) {
  if (conv.spec.kind != LayerKind::Conv) {
    throw std::invalid_argument("relevance_through_bn: layer " +
                                std::to_string(conv.spec.id) + " is not a conv");
  }
  if (cfg.bn_handling() == BnHandling::Identity) {
    return relevance_backward_conv(conv_input, conv.weight, conv.spec.geometry(), upstream,
                                   cfg, clamped);
  }
  return relevance_backward_conv(conv_input, fold_batchnorm(conv.weight, bn),
                                 conv.spec.geometry(), upstream, cfg, clamped);
}

std::pair<Tensor, Tensor> relevance_through_add(const Tensor& upstream, const Tensor& a,
                                                const Tensor& b, float eps) {
  require_shape(a, upstream.shape(), "relevance_through_add branch 1");
  require_shape(b, upstream.shape(), "relevance_through_add branch 2");
  Tensor ra(upstream.shape()), rb(upstream.shape());
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    const float total = a[i] + b[i];
    if (std::fabs(total) < eps) {
      ra[i] = 0.5f * upstream[i];
    } else {
      ra[i] = a[i] / total * upstream[i];
    }
    rb[i] = upstream[i] - ra[i];
  }
  return {std::move(ra), std::move(rb)};
}

RelevanceMap full_relevance_pass(const ModelGraph& model, const ActivationTrace& trace,
                                 std::span<const int> labels, const LrpConfig& cfg,
                                 bool to_input) {
  if (trace.generation != model.generation() || trace.outputs.size() != model.size()) {
    throw std::logic_error(
        "full_relevance_pass: trace was captured before the model was modified");
  }
  const Tensor& logits = trace.outputs.back();
  const std::size_t batch = logits.dim(0), classes = model.classes();
  if (labels.size() != batch) {
    throw std::invalid_argument("full_relevance_pass: " + std::to_string(labels.size()) +
                                " labels for a batch of " + std::to_string(batch));
  }

  RelevanceMap map;
  map.layers.resize(model.size());
  Tensor start({batch, classes});
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<float> delta = init_output_relevance(labels[b], classes);
    std::copy(delta.begin(), delta.end(), start.data() + b * classes);
  }
  map.layers.back() = std::move(start);

  auto act = [&](int id) -> const Tensor& {
    return id == kModelInput ? trace.input : trace.outputs[static_cast<std::size_t>(id)];
  };
  auto deposit = [&](int id, Tensor r) {
    Tensor& slot = id == kModelInput ? map.input : map.layers[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = std::move(r);
    } else {
      simd::active().axpy(slot.size(), 1.0f, r.data(), slot.data());
    }
  };

  for (int id = model.output_layer(); id >= 0; --id) {
    const Layer& l = model.layer(id);
    const Tensor& r = map.layers[static_cast<std::size_t>(id)];
    if (r.empty()) {
      throw std::logic_error("full_relevance_pass: no relevance reached layer " +
                             std::to_string(id));
    }
    const int src = l.spec.inputs[0];
    if (src == kModelInput && !to_input) continue;
    switch (l.spec.kind) {
      case LayerKind::Linear:
        deposit(src, relevance_backward_linear(act(src), l.weight, r, cfg, &map.clamped));
        break;
      case LayerKind::Conv: {
        const auto& users = model.consumers(id);
        const bool folded = cfg.bn_handling() == BnHandling::Fold && users.size() == 1 &&
                            model.layer(users[0]).spec.kind == LayerKind::BatchNorm;
        if (folded) {
          deposit(src, relevance_through_bn(r, act(src), l, model.layer(users[0]), cfg,
                                            &map.clamped));
        } else {
          deposit(src, relevance_backward_conv(act(src), l.weight, l.spec.geometry(), r,
                                               cfg, &map.clamped));
        }
        break;
      }
      case LayerKind::BatchNorm:
        deposit(src, r);  // the scale is folded into the producing conv
        break;
      case LayerKind::Relu:
        deposit(src, relevance_through_relu(r));
        break;
      case LayerKind::MaxPool:
        deposit(src, relevance_through_maxpool(
                         r, trace.argmax[static_cast<std::size_t>(id)], act(src), cfg));
        break;
      case LayerKind::GlobalAvgPool:
        deposit(src, relevance_through_gap(r, act(src), cfg, &map.clamped));
        break;
      case LayerKind::Add: {
        const int other = l.spec.inputs[1];
        auto [ra, rb] = relevance_through_add(r, act(src), act(other), cfg.eps());
        deposit(src, std::move(ra));
        if (other != kModelInput || to_input) deposit(other, std::move(rb));
        break;
      }
    }
  }
  return map;
}

}  // namespace frsp::lrp
