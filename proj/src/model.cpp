#include "frsp/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "frsp/simd.hpp"

namespace frsp {

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Linear: return "linear";
    case LayerKind::Add: return "add";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ModelGraph

const std::vector<int>& ModelGraph::consumers(int id) const {
  return consumers_.at(static_cast<std::size_t>(id + 1));
}

const Shape& ModelGraph::shape_of(int id) const {
  return id == kModelInput ? input_shape_ : layer(id).out_shape;
}

const std::vector<ChannelDependency>& ModelGraph::dependents(int conv_id) const {
  if (layer(conv_id).spec.kind != LayerKind::Conv) {
    throw ModelError("layer " + std::to_string(conv_id) + " is not a conv");
  }
  return deps_[static_cast<std::size_t>(conv_id)];
}

bool ModelGraph::prune_eligible(int conv_id) const {
  return conv_id >= 0 && static_cast<std::size_t>(conv_id) < layers_.size() &&
         eligible_[static_cast<std::size_t>(conv_id)] != 0;
}

std::vector<std::pair<ParamKey, Tensor*>> ModelGraph::parameters() {
  std::vector<std::pair<ParamKey, Tensor*>> out;
  for (Layer& l : layers_) {
    if (!l.weight.empty()) out.push_back({{l.spec.id, ParamSlot::Weight}, &l.weight});
    if (!l.bias.empty()) out.push_back({{l.spec.id, ParamSlot::Bias}, &l.bias});
  }
  return out;
}

std::vector<std::pair<ParamKey, const Tensor*>> ModelGraph::parameters() const {
  std::vector<std::pair<ParamKey, const Tensor*>> out;
  for (const Layer& l : layers_) {
    if (!l.weight.empty()) out.push_back({{l.spec.id, ParamSlot::Weight}, &l.weight});
    if (!l.bias.empty()) out.push_back({{l.spec.id, ParamSlot::Bias}, &l.bias});
  }
  return out;
}

std::vector<int> ModelGraph::conv_layers() const {
  std::vector<int> ids;
  for (const Layer& l : layers_) {
    if (l.spec.kind == LayerKind::Conv) ids.push_back(l.spec.id);
  }
  return ids;
}

std::size_t ModelGraph::total_conv_channels() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) {
    if (l.spec.kind == LayerKind::Conv) n += l.spec.out_channels;
  }
  return n;
}

void ModelGraph::infer_shapes() {
  for (Layer& l : layers_) {
    const LayerSpec& s = l.spec;
    auto in_shape = [&](std::size_t i) -> const Shape& { return shape_of(s.inputs.at(i)); };
    const Shape& in = in_shape(0);
    auto need_spatial = [&] {
      if (in.size() != 3) {
        throw ModelError("layer " + std::to_string(s.id) + " (" +
                         std::string(kind_name(s.kind)) +
                         ") needs a (C, H, W) input, got " + shape_str(in));
      }
    };
    switch (s.kind) {
      case LayerKind::Conv: {
        need_spatial();
        if (in[1] + 2 * s.pad < s.kernel || in[2] + 2 * s.pad < s.kernel) {
          throw ModelError("conv layer " + std::to_string(s.id) + ": kernel " +
                           std::to_string(s.kernel) + " exceeds input " + shape_str(in));
        }
        const std::size_t ho = (in[1] + 2 * s.pad - s.kernel) / s.stride + 1;
        const std::size_t wo = (in[2] + 2 * s.pad - s.kernel) / s.stride + 1;
        l.out_shape = {s.out_channels, ho, wo};
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        l.out_shape = in;
        break;
      case LayerKind::MaxPool:
        need_spatial();
        if (in[1] < 2 || in[2] < 2) {
          throw ModelError("maxpool layer " + std::to_string(s.id) +
                           ": input too small " + shape_str(in));
        }
        l.out_shape = {in[0], in[1] / 2, in[2] / 2};
        break;
      case LayerKind::GlobalAvgPool:
        need_spatial();
        l.out_shape = {in[0], 1, 1};
        break;
      case LayerKind::Linear:
        l.out_shape = {s.out_channels};
        break;
      case LayerKind::Add:
        if (in_shape(1) != in) {
          throw ModelError("add layer " + std::to_string(s.id) +
                           ": branch shapes differ " + shape_str(in) + " vs " +
                           shape_str(in_shape(1)));
        }
        l.out_shape = in;
        break;
    }
  }
}

void ModelGraph::analyze_dependencies() {
  deps_.assign(layers_.size(), {});
  eligible_.assign(layers_.size(), 0);
  for (const Layer& l : layers_) {
    if (l.spec.kind != LayerKind::Conv) continue;
    const int producer = l.spec.id;
    bool ok = true;
    std::vector<ChannelDependency> deps;
    std::vector<int> frontier{producer};
    std::set<int> seen;
    while (!frontier.empty()) {
      const int cur = frontier.back();
      frontier.pop_back();
      for (int c : consumers(cur)) {
        if (!seen.insert(c).second) continue;
        const Layer& cl = layer(c);
        switch (cl.spec.kind) {
          case LayerKind::BatchNorm:
            deps.push_back({c, SliceKind::BatchNormEntry, 1});
            frontier.push_back(c);
            break;
          case LayerKind::Relu:
          case LayerKind::MaxPool:
          case LayerKind::GlobalAvgPool:
            frontier.push_back(c);
            break;
          case LayerKind::Conv:
            deps.push_back({c, SliceKind::ConvInput, 1});
            break;
          case LayerKind::Linear: {
            const Shape& in = shape_of(cur);
            std::size_t span = 1;
            for (std::size_t i = 1; i < in.size(); ++i) span *= in[i];
            deps.push_back({c, SliceKind::LinearInput, span});
            break;
          }
          case LayerKind::Add:
            ok = false;
            break;
        }
      }
    }
    std::sort(deps.begin(), deps.end());
    deps_[static_cast<std::size_t>(producer)] = std::move(deps);
    eligible_[static_cast<std::size_t>(producer)] = ok ? 1 : 0;
  }
}

void ModelGraph::finalize() {
  if (layers_.empty()) throw ModelError("model has no layers");
  consumers_.assign(layers_.size() + 1, {});
  for (const Layer& l : layers_) {
    const std::size_t want = l.spec.kind == LayerKind::Add ? 2 : 1;
    if (l.spec.inputs.size() != want) {
      throw ModelError("layer " + std::to_string(l.spec.id) + " (" +
                       std::string(kind_name(l.spec.kind)) + ") needs " +
                       std::to_string(want) + " input(s)");
    }
    for (int in : l.spec.inputs) {
      if (in < kModelInput || in >= l.spec.id) {
        throw ModelError("layer " + std::to_string(l.spec.id) +
                         " reads from layer " + std::to_string(in) +
                         ", which does not precede it");
      }
      consumers_[static_cast<std::size_t>(in + 1)].push_back(l.spec.id);
    }
  }
  const Layer& out = layers_.back();
  if (out.spec.kind != LayerKind::Linear || out.spec.out_channels != classes_) {
    throw ModelError("the final layer must be a linear layer producing " +
                     std::to_string(classes_) + " logits");
  }
  for (const Layer& l : layers_) {
    if (l.spec.id != output_layer() && consumers(l.spec.id).empty()) {
      throw ModelError("layer " + std::to_string(l.spec.id) + " output is unused");
    }
    if (l.spec.kind == LayerKind::BatchNorm) {
      const int src = l.spec.inputs[0];
      if (src == kModelInput || layer(src).spec.kind != LayerKind::Conv ||
          consumers(src).size() != 1) {
        throw ModelError("bn layer " + std::to_string(l.spec.id) +
                         " must directly and solely follow a conv");
      }
    }
  }
  infer_shapes();
  analyze_dependencies();
}

// ---------------------------------------------------------------------------
// ModelBuilder

ModelBuilder::ModelBuilder(Shape input, std::size_t classes) {
  if (input.size() != 3 || shape_numel(input) == 0) {
    throw ModelError("model input must be a non-empty (C, H, W) shape, got " +
                     shape_str(input));
  }
  if (classes == 0) throw ModelError("class count must be >= 1");
  model_.input_shape_ = std::move(input);
  model_.classes_ = classes;
}

int ModelBuilder::push(LayerSpec spec) {
  spec.id = static_cast<int>(model_.layers_.size());
  for (int in : spec.inputs) {
    if (in < kModelInput || in >= spec.id) {
      throw ModelError("layer input " + std::to_string(in) + " does not exist yet");
    }
  }
  Layer l;
  l.spec = std::move(spec);
  model_.layers_.push_back(std::move(l));
  return last();
}

int ModelBuilder::conv(int input, std::size_t out, std::size_t kernel,
                       std::size_t stride, bool bias) {
  if (out == 0 || kernel == 0 || stride == 0) {
    throw ModelError("conv needs positive channels, kernel and stride");
  }
  LayerSpec s;
  s.kind = LayerKind::Conv;
  s.inputs = {input};
  s.out_channels = out;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = kernel / 2;
  s.bias = bias;
  return push(std::move(s));
}

int ModelBuilder::bn(int input) {
  LayerSpec s;
  s.kind = LayerKind::BatchNorm;
  s.inputs = {input};
  return push(std::move(s));
}

int ModelBuilder::relu(int input) {
  LayerSpec s;
  s.kind = LayerKind::Relu;
  s.inputs = {input};
  return push(std::move(s));
}

int ModelBuilder::maxpool(int input) {
  LayerSpec s;
  s.kind = LayerKind::MaxPool;
  s.inputs = {input};
  return push(std::move(s));
}

int ModelBuilder::gap(int input) {
  LayerSpec s;
  s.kind = LayerKind::GlobalAvgPool;
  s.inputs = {input};
  return push(std::move(s));
}

int ModelBuilder::linear(int input, std::size_t out, bool bias) {
  if (out == 0) throw ModelError("linear needs at least one output");
  LayerSpec s;
  s.kind = LayerKind::Linear;
  s.inputs = {input};
  s.out_channels = out;
  s.bias = bias;
  return push(std::move(s));
}

int ModelBuilder::add(int a, int b) {
  LayerSpec s;
  s.kind = LayerKind::Add;
  s.inputs = {a, b};
  return push(std::move(s));
}

ModelGraph ModelBuilder::build(std::uint64_t seed) && {
  ModelGraph m = std::move(model_);
  m.finalize();
  std::mt19937_64 rng(seed);
  for (Layer& l : m.layers_) {
    const LayerSpec& s = l.spec;
    switch (s.kind) {
      case LayerKind::Conv: {
        const std::size_t cin = m.shape_of(s.inputs[0])[0];
        const std::size_t fan_in = cin * s.kernel * s.kernel;
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / float(fan_in)));
        l.weight = Tensor({s.out_channels, cin, s.kernel, s.kernel});
        for (float& v : l.weight.values()) v = dist(rng);
        if (s.bias) l.bias = Tensor({s.out_channels});
        break;
      }
      case LayerKind::Linear: {
        const std::size_t in = shape_numel(m.shape_of(s.inputs[0]));
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / float(in)));
        l.weight = Tensor({s.out_channels, in});
        for (float& v : l.weight.values()) v = dist(rng);
        if (s.bias) l.bias = Tensor({s.out_channels});
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t c = m.shape_of(s.inputs[0])[0];
        l.weight = Tensor({c}, 1.0f);
        l.bias = Tensor({c});
        l.running_mean = Tensor({c});
        l.running_var = Tensor({c}, 1.0f);
        break;
      }
      default:
        break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Families

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

std::size_t parse_size(const std::string& tok, const std::string& ctx) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != tok.size() || tok.empty()) {
    throw ModelError("plan token '" + ctx + "': '" + tok + "' is not a number");
  }
  return static_cast<std::size_t>(v);
}

int conv_unit(ModelBuilder& b, int in, std::size_t out, std::size_t k,
              std::size_t stride, const ArchConfig& a, bool activate = true) {
  int x = b.conv(in, out, k, stride, a.conv_bias);
  if (a.batch_norm) x = b.bn(x);
  return activate ? b.relu(x) : x;
}

ModelGraph build_toy(const ArchConfig& a, std::uint64_t seed) {
  const std::vector<std::size_t> widths =
      a.widths.empty() ? std::vector<std::size_t>{8, 8, 16, 16, 32, 32} : a.widths;
  ModelBuilder b(a.input, a.classes);
  int x = kModelInput;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    x = conv_unit(b, x, widths[i], 3, 1, a);
    const bool pair_end = i % 2 == 1;
    if (pair_end && i + 1 < widths.size()) x = b.maxpool(x);
  }
  x = b.gap(x);
  b.linear(x, a.classes);
  return std::move(b).build(seed);
}

ModelGraph build_sequential(const ArchConfig& a, std::uint64_t seed) {
  ModelBuilder b(a.input, a.classes);
  int x = kModelInput;
  for (const std::string& tok : split(a.plan, ',')) {
    const std::vector<std::string> parts = split(tok, ':');
    const std::string& op = parts.at(0);
    if (op == "conv") {
      if (parts.size() < 2 || parts.size() > 4) {
        throw ModelError("plan token '" + tok + "': expected conv:<out>[:<k>[:<stride>]]");
      }
      const std::size_t out = parse_size(parts[1], tok);
      const std::size_t k = parts.size() > 2 ? parse_size(parts[2], tok) : 3;
      const std::size_t stride = parts.size() > 3 ? parse_size(parts[3], tok) : 1;
      x = b.conv(x, out, k, stride, a.conv_bias);
    } else if (op == "bn") {
      x = b.bn(x);
    } else if (op == "relu") {
      x = b.relu(x);
    } else if (op == "pool") {
      x = b.maxpool(x);
    } else if (op == "gap") {
      x = b.gap(x);
    } else {
      throw ModelError("plan token '" + tok + "': unknown layer kind");
    }
  }
  if (x == kModelInput) throw ModelError("sequential plan is empty");
  b.linear(x, a.classes, a.conv_bias);
  return std::move(b).build(seed);
}

ModelGraph build_vgg(const ArchConfig& a, std::uint64_t seed) {
  static const std::map<std::size_t, std::vector<int>> cfgs = {
      {11, {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0}},
      {13, {64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0}},
      {16, {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0}},
      {19, {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0,
            512, 512, 512, 512, 0}},
  };
  const auto it = cfgs.find(a.depth);
  if (it == cfgs.end()) {
    throw ModelError("vgg depth " + std::to_string(a.depth) +
                     " not supported (11, 13, 16 or 19)");
  }
  ModelBuilder b(a.input, a.classes);
  int x = kModelInput;
  for (int w : it->second) {
    x = w == 0 ? b.maxpool(x) : conv_unit(b, x, static_cast<std::size_t>(w), 3, 1, a);
  }
  x = b.gap(x);
  b.linear(x, a.classes);
  return std::move(b).build(seed);
}

ModelGraph build_resnet(const ArchConfig& a, std::uint64_t seed) {
  const bool bottleneck = a.block == "bottleneck";
  if (!bottleneck && a.block != "basic") {
    throw ModelError("resnet block '" + a.block + "' unknown (basic | bottleneck)");
  }
  const std::size_t per = bottleneck ? 9 : 6;
  if (a.depth < per + 2 || (a.depth - 2) % per != 0) {
    throw ModelError("resnet depth " + std::to_string(a.depth) + " not representable: " +
                     (bottleneck ? "bottleneck depth must be 9m+2"
                                 : "basic depth must be 6m+2"));
  }
  const std::size_t blocks = (a.depth - 2) / per;
  const std::vector<std::size_t> widths =
      a.widths.empty() ? std::vector<std::size_t>{16, 32, 64} : a.widths;
  const std::size_t expansion = bottleneck ? 4 : 1;

  ModelBuilder b(a.input, a.classes);
  int x = conv_unit(b, kModelInput, widths[0], 3, 1, a);
  std::size_t channels = widths[0];
  for (std::size_t stage = 0; stage < widths.size(); ++stage) {
    const std::size_t w = widths[stage];
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      const std::size_t stride = (stage > 0 && blk == 0) ? 2 : 1;
      const std::size_t out = w * expansion;
      int y;
      if (bottleneck) {
        y = conv_unit(b, x, w, 1, 1, a);
        y = conv_unit(b, y, w, 3, stride, a);
        y = conv_unit(b, y, out, 1, 1, a, false);
      } else {
        y = conv_unit(b, x, w, 3, stride, a);
        y = conv_unit(b, y, out, 3, 1, a, false);
      }
      int shortcut = x;
      if (stride != 1 || channels != out) {
        shortcut = conv_unit(b, x, out, 1, stride, a, false);
      }
      x = b.relu(b.add(y, shortcut));
      channels = out;
    }
  }
  x = b.gap(x);
  b.linear(x, a.classes);
  return std::move(b).build(seed);
}

}  // namespace

ModelGraph build_model(const ArchConfig& a, std::uint64_t seed) {
  if (a.family == "toy") return build_toy(a, seed);
  if (a.family == "sequential") return build_sequential(a, seed);
  if (a.family == "vgg") return build_vgg(a, seed);
  if (a.family == "resnet") return build_resnet(a, seed);
  throw ModelError("unknown architecture family '" + a.family +
                   "' (toy | sequential | vgg | resnet)");
}

// ---------------------------------------------------------------------------
// Execution

namespace {

const Tensor& input_of(const ActivationTrace& t, int id) {
  return id == kModelInput ? t.input : t.outputs[static_cast<std::size_t>(id)];
}

void check_input(const ModelGraph& m, const Tensor& input) {
  const Shape& s = input.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != m.input_shape()) {
    throw ShapeError("model input: expected (B) + " + shape_str(m.input_shape()) +
                     ", got " + shape_str(s));
  }
}

void zero_channel(Tensor& t, std::size_t channel) {
  const Shape& s = t.shape();
  const std::size_t batch = s[0], c = s[1];
  if (channel >= c) {
    throw ShapeError("zero_channels: channel " + std::to_string(channel) +
                     " out of range for " + shape_str(s));
  }
  const std::size_t area = t.size() / (batch * c);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill_n(t.data() + (b * c + channel) * area, area, 0.0f);
  }
}

Tensor run_layer(const Layer& l, const ActivationTrace& t, Mode mode,
                 std::vector<std::uint32_t>* argmax, ops::BatchNormCache* cache,
                 Layer* mutable_layer) {
  const LayerSpec& s = l.spec;
  const Tensor& in = input_of(t, s.inputs[0]);
  switch (s.kind) {
    case LayerKind::Conv:
      return ops::conv2d_forward(in, l.weight, l.bias.empty() ? nullptr : &l.bias,
                                 s.geometry());
    case LayerKind::BatchNorm:
      if (mode == Mode::Train) {
        return ops::batchnorm_forward_train(in, l.weight, l.bias,
                                            mutable_layer->running_mean,
                                            mutable_layer->running_var, cache);
      }
      return ops::batchnorm_forward_eval(in, l.weight, l.bias, l.running_mean,
                                         l.running_var);
    case LayerKind::Relu:
      return ops::relu_forward(in);
    case LayerKind::MaxPool: {
      ops::PoolResult r = ops::maxpool2_forward(in);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.output);
    }
    case LayerKind::GlobalAvgPool:
      return ops::global_avgpool_forward(in);
    case LayerKind::Linear:
      return ops::linear_forward(in, l.weight, l.bias.empty() ? nullptr : &l.bias);
    case LayerKind::Add:
      return ops::add_forward(in, input_of(t, s.inputs[1]));
  }
  throw ModelError("unhandled layer kind");
}

}  // namespace

ForwardResult forward(const ModelGraph& model, const Tensor& input, bool capture,
                      std::span<const ChannelRef> zero_channels) {
  check_input(model, input);
  ActivationTrace t;
  t.input = input;
  t.outputs.resize(model.size());
  t.argmax.resize(model.size());
  t.generation = model.generation();
  t.mode = Mode::Eval;
  for (const Layer& l : model.layers()) {
    const auto id = static_cast<std::size_t>(l.spec.id);
    t.outputs[id] = run_layer(l, t, Mode::Eval, &t.argmax[id], nullptr, nullptr);
    for (const ChannelRef& z : zero_channels) {
      if (z.layer == l.spec.id) zero_channel(t.outputs[id], z.channel);
    }
  }
  ForwardResult r;
  r.logits = t.outputs.back();
  if (capture) r.trace = std::move(t);
  return r;
}

ActivationTrace forward_train(ModelGraph& model, const Tensor& input) {
  check_input(model, input);
  ActivationTrace t;
  t.input = input;
  t.outputs.resize(model.size());
  t.argmax.resize(model.size());
  t.bn.resize(model.size());
  t.generation = model.generation();
  t.mode = Mode::Train;
  for (std::size_t id = 0; id < model.size(); ++id) {
    Layer& l = model.layer(static_cast<int>(id));
    t.outputs[id] = run_layer(l, t, Mode::Train, &t.argmax[id], &t.bn[id], &l);
  }
  return t;
}

Gradients backward(const ModelGraph& model, const ActivationTrace& t,
                   const Tensor& grad_logits) {
  if (t.generation != model.generation() || t.outputs.size() != model.size()) {
    throw std::logic_error("backward: trace does not belong to the current model");
  }
  if (t.mode != Mode::Train) {
    throw std::logic_error("backward: trace was not captured in train mode");
  }
  const auto& k = simd::active();
  std::vector<Tensor> grads(model.size());
  grads.back() = grad_logits;
  Gradients g;
  g.weight.resize(model.size());
  g.bias.resize(model.size());

  auto deliver = [&](int target, Tensor&& d) {
    if (target == kModelInput) return;
    Tensor& slot = grads[static_cast<std::size_t>(target)];
    if (slot.empty()) {
      slot = std::move(d);
    } else {
      require_shape(d, slot.shape(), "backward gradient accumulation");
      k.axpy(slot.size(), 1.0f, d.data(), slot.data());
    }
  };

  for (int id = model.output_layer(); id >= 0; --id) {
    Tensor& gout = grads[static_cast<std::size_t>(id)];
    if (gout.empty()) continue;
    const Layer& l = model.layer(id);
    const LayerSpec& s = l.spec;
    const int src = s.inputs[0];
    const Tensor& in = input_of(t, src);
    const bool need_in = src != kModelInput;
    switch (s.kind) {
      case LayerKind::Conv: {
        ops::ConvGrads cg = ops::conv2d_backward(in, l.weight, !l.bias.empty(), gout,
                                                 s.geometry(), need_in);
        g.weight[id] = std::move(cg.weight);
        g.bias[id] = std::move(cg.bias);
        if (need_in) deliver(src, std::move(cg.input));
        break;
      }
      case LayerKind::BatchNorm: {
        ops::BatchNormGrads bg = ops::batchnorm_backward(gout, l.weight, t.bn[id]);
        g.weight[id] = std::move(bg.gamma);
        g.bias[id] = std::move(bg.beta);
        deliver(src, std::move(bg.input));
        break;
      }
      case LayerKind::Relu:
        if (need_in) deliver(src, ops::relu_backward(t.outputs[id], gout));
        break;
      case LayerKind::MaxPool:
        if (need_in) deliver(src, ops::maxpool2_backward(gout, t.argmax[id], in.shape()));
        break;
      case LayerKind::GlobalAvgPool:
        if (need_in) deliver(src, ops::global_avgpool_backward(gout, in.shape()));
        break;
      case LayerKind::Linear: {
        ops::LinearGrads lg =
            ops::linear_backward(in, l.weight, !l.bias.empty(), gout, need_in);
        g.weight[id] = std::move(lg.weight);
        g.bias[id] = std::move(lg.bias);
        if (need_in) {
          lg.input.reshape(in.shape());
          deliver(src, std::move(lg.input));
        }
        break;
      }
      case LayerKind::Add:
        deliver(s.inputs[1], Tensor(gout));
        deliver(src, std::move(gout));
        break;
    }
    if (!gout.empty()) gout = Tensor();  // release memory early
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pruning

std::vector<ChannelRef> eligible_channels(const ModelGraph& model) {
  std::vector<ChannelRef> out;
  for (int id : model.conv_layers()) {
    if (!model.prune_eligible(id)) continue;
    const std::size_t n = model.layer(id).spec.out_channels;
    for (std::size_t c = 0; c < n; ++c) out.push_back({id, c});
  }
  return out;
}

namespace {

void erase_param(ModelGraph& m, OptimState* optim, int layer, ParamSlot slot,
                 std::size_t axis, std::span<const std::size_t> idx) {
  Layer& l = m.layer(layer);
  Tensor& t = slot == ParamSlot::Weight ? l.weight : l.bias;
  if (t.empty()) return;
  t = erase_along(t, axis, idx);
  if (optim) {
    auto it = optim->momentum.find({layer, slot});
    if (it != optim->momentum.end()) it->second = erase_along(it->second, axis, idx);
  }
}

}  // namespace

void surgery_remove_channels(ModelGraph& model, std::span<const ChannelRef> victims,
                             OptimState* optim) {
  if (victims.empty()) return;
  std::map<int, std::vector<std::size_t>> by_layer;
  for (const ChannelRef& v : victims) {
    if (v.layer < 0 || static_cast<std::size_t>(v.layer) >= model.size() ||
        model.layer(v.layer).spec.kind != LayerKind::Conv) {
      throw SurgeryError("victim layer " + std::to_string(v.layer) + " is not a conv");
    }
    if (!model.prune_eligible(v.layer)) {
      throw SurgeryError("victim layer " + std::to_string(v.layer) +
                         " is not prune-eligible (feeds an add junction)");
    }
    if (v.channel >= model.layer(v.layer).spec.out_channels) {
      throw SurgeryError("victim channel " + std::to_string(v.channel) +
                         " out of range for layer " + std::to_string(v.layer));
    }
    by_layer[v.layer].push_back(v.channel);
  }
  for (auto& [layer, idx] : by_layer) {
    std::sort(idx.begin(), idx.end());
    if (std::adjacent_find(idx.begin(), idx.end()) != idx.end()) {
      throw SurgeryError("duplicate victim in layer " + std::to_string(layer));
    }
    if (idx.size() >= model.layer(layer).spec.out_channels) {
      throw SurgeryError("pruning " + std::to_string(idx.size()) +
                         " channels would empty layer " + std::to_string(layer));
    }
  }

  for (const auto& [layer, idx] : by_layer) {
    erase_param(model, optim, layer, ParamSlot::Weight, 0, idx);
    erase_param(model, optim, layer, ParamSlot::Bias, 0, idx);
    model.layer(layer).spec.out_channels -= idx.size();
    for (const ChannelDependency& d : model.dependents(layer)) {
      switch (d.kind) {
        case SliceKind::BatchNormEntry: {
          erase_param(model, optim, d.layer, ParamSlot::Weight, 0, idx);
          erase_param(model, optim, d.layer, ParamSlot::Bias, 0, idx);
          Layer& bn = model.layer(d.layer);
          bn.running_mean = erase_along(bn.running_mean, 0, idx);
          bn.running_var = erase_along(bn.running_var, 0, idx);
          break;
        }
        case SliceKind::ConvInput:
          erase_param(model, optim, d.layer, ParamSlot::Weight, 1, idx);
          break;
        case SliceKind::LinearInput: {
          std::vector<std::size_t> cols;
          cols.reserve(idx.size() * d.span);
          for (std::size_t c : idx) {
            for (std::size_t j = 0; j < d.span; ++j) cols.push_back(c * d.span + j);
          }
          erase_param(model, optim, d.layer, ParamSlot::Weight, 1, cols);
          break;
        }
      }
    }
  }
  model.infer_shapes();
  model.analyze_dependencies();
  ++model.generation_;
}

}  // namespace frsp
