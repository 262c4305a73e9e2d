#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "frsp/ops.hpp"
#include "frsp/optim.hpp"
#include "frsp/tensor.hpp"

namespace frsp {

enum class LayerKind { Conv, BatchNorm, Relu, MaxPool, GlobalAvgPool, Linear, Add };

std::string_view kind_name(LayerKind kind);

/// Input id that refers to the model input rather than a layer.
inline constexpr int kModelInput = -1;

struct LayerSpec {
  int id = 0;
  LayerKind kind = LayerKind::Relu;
  std::vector<int> inputs;
  std::size_t out_channels = 0;  // conv filters, linear outputs
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = false;

  ops::ConvGeometry geometry() const { return {stride, pad}; }
};

struct Layer {
  LayerSpec spec;
  Tensor weight;  // conv (Cout, Cin, K, K); linear (out, in); bn gamma
  Tensor bias;    // conv/linear bias (may be empty); bn beta
  Tensor running_mean;
  Tensor running_var;
  Shape out_shape;  // per sample: (C, H, W), or (out) for linear
};

struct ChannelRef {
  int layer = 0;
  std::size_t channel = 0;
  auto operator<=>(const ChannelRef&) const = default;
};

/// How a consumer layer sees one output channel of a producer conv.
enum class SliceKind { BatchNormEntry, ConvInput, LinearInput };

struct ChannelDependency {
  int layer = 0;
  SliceKind kind = SliceKind::ConvInput;
  std::size_t span = 1;  // linear: input features per channel
  auto operator<=>(const ChannelDependency&) const = default;
};

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SurgeryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelGraph {
 public:
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const Layer& layer(int id) const { return layers_.at(static_cast<std::size_t>(id)); }
  Layer& layer(int id) { return layers_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return layers_.size(); }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t classes() const noexcept { return classes_; }
  int output_layer() const noexcept { return static_cast<int>(layers_.size()) - 1; }

  /// Layers that read the output of `id` (kModelInput allowed).
  const std::vector<int>& consumers(int id) const;

  /// Output tensor shape of layer `id` (or the model input) for one sample.
  const Shape& shape_of(int id) const;

  /// Dependents of a conv's output channels, in layer order.
  const std::vector<ChannelDependency>& dependents(int conv_id) const;
  bool prune_eligible(int conv_id) const;

  /// Incremented whenever channel surgery changes the architecture.
  std::uint64_t generation() const noexcept { return generation_; }

  std::vector<std::pair<ParamKey, Tensor*>> parameters();
  std::vector<std::pair<ParamKey, const Tensor*>> parameters() const;

  /// Conv layer ids in order.
  std::vector<int> conv_layers() const;
  std::size_t total_conv_channels() const;

 private:
  friend class ModelBuilder;
  friend void surgery_remove_channels(ModelGraph&, std::span<const ChannelRef>,
                                      OptimState*);

  void finalize();
  void infer_shapes();
  void analyze_dependencies();

  std::vector<Layer> layers_;
  Shape input_shape_;
  std::size_t classes_ = 0;
  std::vector<std::vector<int>> consumers_;  // index id + 1
  std::vector<std::vector<ChannelDependency>> deps_;
  std::vector<char> eligible_;
  std::uint64_t generation_ = 0;
};

/// Incremental graph construction; every method returns the new layer id.
class ModelBuilder {
 public:
  ModelBuilder(Shape input, std::size_t classes);

  int conv(int input, std::size_t out, std::size_t kernel, std::size_t stride = 1,
           bool bias = false);
  int bn(int input);
  int relu(int input);
  int maxpool(int input);
  int gap(int input);
  int linear(int input, std::size_t out, bool bias = true);
  int add(int a, int b);

  int last() const noexcept { return static_cast<int>(model_.layers_.size()) - 1; }

  /// Validates the graph and applies He fan-in normal initialization.
  ModelGraph build(std::uint64_t seed) &&;

 private:
  int push(LayerSpec spec);
  ModelGraph model_;
};

struct ArchConfig {
  std::string family = "toy";  // toy | sequential | vgg | resnet
  std::size_t depth = 0;
  Shape input{3, 32, 32};
  std::size_t classes = 10;
  std::vector<std::size_t> widths;  // toy: conv widths; resnet: stage widths
  std::string plan;                 // sequential: layer plan
  std::string block = "basic";      // resnet: basic | bottleneck
  bool batch_norm = true;
  bool conv_bias = false;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Throws ModelError for unknown families or unrepresentable depths.
ModelGraph build_model(const ArchConfig& arch, std::uint64_t seed);

enum class Mode { Train, Eval };

struct ActivationTrace {
  Tensor input;
  std::vector<Tensor> outputs;                     // by layer id
  std::vector<std::vector<std::uint32_t>> argmax;  // maxpool layers only
  std::vector<ops::BatchNormCache> bn;             // train mode only
  std::uint64_t generation = 0;
  Mode mode = Mode::Eval;
};

struct ForwardResult {
  Tensor logits;
  std::optional<ActivationTrace> trace;
};

/// Eval-mode forward. `zero_channels` forces the listed output channels of
/// the named layers to zero before they are consumed.
ForwardResult forward(const ModelGraph& model, const Tensor& input,
                      bool capture = false,
                      std::span<const ChannelRef> zero_channels = {});

/// Train-mode forward (batch statistics, running stats updated); always
/// returns the trace needed by backward().
ActivationTrace forward_train(ModelGraph& model, const Tensor& input);

struct Gradients {
  std::vector<Tensor> weight;  // by layer id; empty for parameterless layers
  std::vector<Tensor> bias;
};

Gradients backward(const ModelGraph& model, const ActivationTrace& trace,
                   const Tensor& grad_logits);

/// Every prune-eligible conv channel, ordered by (layer id, channel).
std::vector<ChannelRef> eligible_channels(const ModelGraph& model);

/// Physically removes the victim channels: producer filters and biases,
/// attached batch-norm entries, dependent input slices and the matching
/// optimizer momentum slices. Validates all victims first; on any error the
/// model is left untouched and SurgeryError is thrown.
void surgery_remove_channels(ModelGraph& model,
                             std::span<const ChannelRef> victims,
                             OptimState* optim);

}  // namespace frsp
