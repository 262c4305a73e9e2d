#pragma once

// Forward/backward kernels for the fixed layer set. All activations are
// (B, C, H, W); linear layers take any (B, ...) input and flatten it.

#include <cstdint>
#include <span>
#include <vector>

#include "frsp/tensor.hpp"

namespace frsp::ops {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

Shape conv2d_output_shape(const Shape& input, const Shape& weight,
                          ConvGeometry g);

/// Direct convolution (im2col + gemm). `bias` may be null.
Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      const Tensor* bias, ConvGeometry g);

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;  // empty when the layer has no bias
};

/// `input` is the tensor saved from the forward pass; an empty tensor means
/// the context is missing and throws std::logic_error.
ConvGrads conv2d_backward(const Tensor& input, const Tensor& weight,
                          bool has_bias, const Tensor& grad_out, ConvGeometry g,
                          bool need_input_grad = true);

/// Transposed convolution: the input-gradient half of conv2d_backward.
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& input_shape, ConvGeometry g);

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& y, const Tensor& grad_out);

/// 2x2 stride-2 max pooling. argmax holds, per output element, the flat
/// index of the winning element inside its (H, W) input plane.
struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;
};
PoolResult maxpool2_forward(const Tensor& x);
Tensor maxpool2_backward(const Tensor& grad_out,
                         std::span<const std::uint32_t> argmax,
                         const Shape& input_shape);

/// (B, C, H, W) -> (B, C, 1, 1)
Tensor global_avgpool_forward(const Tensor& x);
Tensor global_avgpool_backward(const Tensor& grad_out, const Shape& input_shape);

/// weight is (out, in); input is (B, ...) with product of trailing dims == in.
Tensor linear_forward(const Tensor& input, const Tensor& weight,
                      const Tensor* bias);

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};
LinearGrads linear_backward(const Tensor& input, const Tensor& weight,
                            bool has_bias, const Tensor& grad_out,
                            bool need_input_grad = true);

/// Input-gradient half of linear_backward; result has `input_shape`.
Tensor linear_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const Shape& input_shape);

Tensor add_forward(const Tensor& a, const Tensor& b);

struct XentResult {
  double loss = 0.0;  // mean over the batch
  Tensor grad;        // d loss / d logits
};
XentResult softmax_xent(const Tensor& logits, std::span<const int> labels);

struct BatchNormCache {
  Tensor xhat;
  std::vector<float> inv_std;
};

inline constexpr float kBnEps = 1e-5f;
inline constexpr float kBnMomentum = 0.1f;

/// Batch statistics; updates running stats (unbiased variance) in place.
Tensor batchnorm_forward_train(const Tensor& x, const Tensor& gamma,
                               const Tensor& beta, Tensor& running_mean,
                               Tensor& running_var, BatchNormCache* cache);
Tensor batchnorm_forward_eval(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, const Tensor& running_mean,
                              const Tensor& running_var);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BatchNormGrads batchnorm_backward(const Tensor& grad_out, const Tensor& gamma,
                                  const BatchNormCache& cache);

}  // namespace frsp::ops
