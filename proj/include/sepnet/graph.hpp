/* Copyright (c) 2026 The sepnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sepnet/ops.hpp"
#include "sepnet/pattern.hpp"
#include "sepnet/tensor.hpp"

namespace sepnet {

/// Node id that refers to the network input.
inline constexpr const char* kInputId = "data";

enum class NodeKind : std::uint8_t {
  Conv,
  ReLU,
  BatchNorm,
  Add,
  GlobalAvgPool,
  AvgPool,
  DownsamplePad,
  Linear,
  Softmax,
};

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Conv: return "conv";
    case NodeKind::ReLU: return "relu";
    case NodeKind::BatchNorm: return "batchnorm";
    case NodeKind::Add: return "add";
    case NodeKind::GlobalAvgPool: return "gap";
    case NodeKind::AvgPool: return "avgpool";
    case NodeKind::DownsamplePad: return "downsample";
    case NodeKind::Linear: return "linear";
    case NodeKind::Softmax: return "softmax";
  }
  return "?";
}

inline std::optional<NodeKind> parse_node_kind(const std::string& s) {
  for (auto k : {NodeKind::Conv, NodeKind::ReLU, NodeKind::BatchNorm,
                 NodeKind::Add, NodeKind::GlobalAvgPool, NodeKind::AvgPool,
                 NodeKind::DownsamplePad, NodeKind::Linear, NodeKind::Softmax}) {
    if (s == node_kind_name(k)) return k;
  }
  return std::nullopt;
}

enum class Mode { Train, Eval };

/// Position of a model in the train -> binarize -> fine-tune -> quantize flow.
enum class Stage : std::uint8_t { Full, BiPattern, Refined, Quantized };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Full: return "Full";
    case Stage::BiPattern: return "BiPattern";
    case Stage::Refined: return "Refined";
    case Stage::Quantized: return "Quantized";
  }
  return "?";
}

inline std::optional<Stage> parse_stage(const std::string& s) {
  for (auto st : {Stage::Full, Stage::BiPattern, Stage::Refined, Stage::Quantized}) {
    if (s == stage_name(st)) return st;
  }
  return std::nullopt;
}

struct ConvSpec {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 1;
  std::size_t pad = 0;
  std::size_t stride = 1;
  std::size_t groups = 1;
  bool bias = false;

  ConvParams params() const { return {pad, stride, groups}; }
  std::size_t weight_count() const { return kernel * kernel * in_ch * out_ch / groups; }
  bool operator==(const ConvSpec&) const = default;
};

struct LinearSpec {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool bias = true;
  bool operator==(const LinearSpec&) const = default;
};

struct PoolSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  bool operator==(const PoolSpec&) const = default;
};

struct DownsampleSpec {
  std::size_t stride = 2;
  std::size_t out_channels = 0;
  bool operator==(const DownsampleSpec&) const = default;
};

/// One vertex of the static layer graph. Only the spec matching `kind` is
/// meaningful. `role` is a free-form tag; builders mark the k x k branch of a
/// pattern residual block as "pattern".
struct LayerNode {
  std::string id;
  NodeKind kind = NodeKind::ReLU;
  std::vector<std::string> inputs;
  ConvSpec conv;
  std::size_t bn_channels = 0;
  LinearSpec linear;
  PoolSpec pool;
  DownsampleSpec downsample;
  std::string role;

  bool operator==(const LayerNode&) const = default;
};

inline constexpr const char* kPatternRole = "pattern";

struct NetworkDescriptor {
  std::string name;
  Shape input_shape;  // C x H x W
  std::size_t class_count = 0;
  std::vector<LayerNode> nodes;

  const std::string& output_id() const {
    if (nodes.empty()) throw ConfigError("network '" + name + "' has no nodes");
    return nodes.back().id;
  }
  bool operator==(const NetworkDescriptor&) const = default;
};

/// Checks the DAG and infers per-node output shapes (C x H x W, batch
/// excluded). Throws ConfigError / ShapeError naming the offending node.
inline std::vector<Shape> infer_shapes(const NetworkDescriptor& d) {
  if (d.input_shape.size() != 3) {
    throw ConfigError("network '" + d.name + "': input shape must be C x H x W");
  }
  for (auto e : d.input_shape) {
    if (e == 0) throw ConfigError("network '" + d.name + "': zero input extent");
  }
  std::unordered_map<std::string, std::size_t> index;
  std::vector<Shape> shapes;
  shapes.reserve(d.nodes.size());
  auto fail = [&](const LayerNode& n, const std::string& msg) -> ConfigError {
    return ConfigError("node '" + n.id + "' (" + node_kind_name(n.kind) + "): " + msg);
  };
  for (const auto& n : d.nodes) {
    if (n.id.empty() || n.id == kInputId || index.count(n.id)) {
      throw fail(n, "node id must be unique and not '" + std::string(kInputId) + "'");
    }
    const std::size_t arity = n.kind == NodeKind::Add ? 2 : 1;
    if (n.inputs.size() != arity) {
      throw fail(n, "expects " + std::to_string(arity) + " input(s), got " +
                        std::to_string(n.inputs.size()));
    }
    std::vector<Shape> in;
    for (const auto& src : n.inputs) {
      if (src == kInputId) {
        in.push_back(d.input_shape);
      } else if (auto it = index.find(src); it != index.end()) {
        in.push_back(shapes[it->second]);
      } else {
        throw fail(n, "input '" + src + "' is not an earlier node");
      }
    }
    const Shape& x = in[0];
    Shape out;
    switch (n.kind) {
      case NodeKind::Conv: {
        const auto& c = n.conv;
        if (x.size() != 3) throw fail(n, "expects a C x H x W input");
        if (c.in_ch == 0 || c.out_ch == 0 || c.kernel == 0 || c.stride == 0 || c.groups == 0) {
          throw fail(n, "channels, kernel, stride and groups must be positive");
        }
        if (c.in_ch % c.groups || c.out_ch % c.groups) {
          throw fail(n, "channels " + std::to_string(c.in_ch) + "->" +
                            std::to_string(c.out_ch) + " not divisible by groups " +
                            std::to_string(c.groups));
        }
        if (x[0] != c.in_ch) {
          throw ShapeError("node '" + n.id + "': expects " + std::to_string(c.in_ch) +
                           " input channels, got " + std::to_string(x[0]));
        }
        out = {c.out_ch, conv_out_extent(x[1], c.kernel, c.pad, c.stride),
               conv_out_extent(x[2], c.kernel, c.pad, c.stride)};
        break;
      }
      case NodeKind::BatchNorm:
        if (x.size() != 3 || x[0] != n.bn_channels) {
          throw ShapeError("node '" + n.id + "': batchnorm over " +
                           std::to_string(n.bn_channels) + " channels, input " + to_string(x));
        }
        out = x;
        break;
      case NodeKind::ReLU:
      case NodeKind::Softmax:
        out = x;
        break;
      case NodeKind::Add:
        if (in[0] != in[1]) {
          throw ShapeError("node '" + n.id + "': add of " + to_string(in[0]) +
                           " and " + to_string(in[1]));
        }
        out = x;
        break;
      case NodeKind::GlobalAvgPool:
        if (x.size() != 3) throw fail(n, "expects a C x H x W input");
        out = {x[0], 1, 1};
        break;
      case NodeKind::AvgPool:
        if (x.size() != 3) throw fail(n, "expects a C x H x W input");
        if (n.pool.kernel == 0 || n.pool.stride == 0) throw fail(n, "bad pool spec");
        out = {x[0], conv_out_extent(x[1], n.pool.kernel, 0, n.pool.stride),
               conv_out_extent(x[2], n.pool.kernel, 0, n.pool.stride)};
        break;
      case NodeKind::DownsamplePad:
        if (x.size() != 3) throw fail(n, "expects a C x H x W input");
        if (n.downsample.stride == 0 || n.downsample.out_channels < x[0]) {
          throw fail(n, "bad downsample spec");
        }
        out = {n.downsample.out_channels, (x[1] - 1) / n.downsample.stride + 1,
               (x[2] - 1) / n.downsample.stride + 1};
        break;
      case NodeKind::Linear: {
        const std::size_t features = shape_numel(x);
        if (features != n.linear.in_features || n.linear.out_features == 0) {
          throw ShapeError("node '" + n.id + "': linear expects " +
                           std::to_string(n.linear.in_features) + " features, got " +
                           std::to_string(features));
        }
        out = {n.linear.out_features};
        break;
      }
    }
    index.emplace(n.id, shapes.size());
    shapes.push_back(std::move(out));
  }
  if (d.nodes.empty()) throw ConfigError("network '" + d.name + "' has no nodes");
  return shapes;
}

inline void validate(const NetworkDescriptor& d) { (void)infer_shapes(d); }

// ---------------------------------------------------------------------------

enum class SlotRole : std::uint8_t { Weight, Bias, Gamma, Beta, RunningMean, RunningVar };

inline const char* slot_role_name(SlotRole r) {
  switch (r) {
    case SlotRole::Weight: return "weight";
    case SlotRole::Bias: return "bias";
    case SlotRole::Gamma: return "gamma";
    case SlotRole::Beta: return "beta";
    case SlotRole::RunningMean: return "running_mean";
    case SlotRole::RunningVar: return "running_var";
  }
  return "?";
}

/// A stored tensor of the network. `value` is always the dense tensor used by
/// compute; for BIN1 it equals pattern->reconstruct(), for Q8
/// quant->dequantize().
template <typename T>
struct ParamSlot {
  std::string owner;
  std::string name;
  SlotRole role = SlotRole::Weight;
  Tensor<T> value;
  Encoding encoding = Encoding::F32;
  bool frozen_pattern = false;
  std::optional<BinaryPattern<T>> pattern;
  std::optional<Quant8Block<T>> quant;

  // Running statistics are state, not parameters.
  bool is_parameter() const {
    return role != SlotRole::RunningMean && role != SlotRole::RunningVar;
  }
  bool trainable() const { return is_parameter() && encoding != Encoding::Q8; }
};

template <typename T>
struct SlotGradient {
  Tensor<T> dense;        // empty for frozen patterns and running statistics
  std::vector<T> alpha;   // one entry per scale for frozen patterns
};

template <typename T>
using Gradients = std::vector<SlotGradient<T>>;

/// Executable network: a validated descriptor plus its parameter registry.
template <typename T>
class Network {
 public:
  Network() = default;

  explicit Network(NetworkDescriptor desc) : desc_(std::move(desc)) {
    shapes_ = infer_shapes(desc_);
    node_slots_.resize(desc_.nodes.size());
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < desc_.nodes.size(); ++i) index.emplace(desc_.nodes[i].id, i);
    for (const auto& n : desc_.nodes) {
      std::vector<std::ptrdiff_t> srcs;
      for (const auto& src : n.inputs) {
        srcs.push_back(src == kInputId ? -1 : static_cast<std::ptrdiff_t>(index.at(src)));
      }
      inputs_.push_back(std::move(srcs));
    }
    for (std::size_t i = 0; i < desc_.nodes.size(); ++i) {
      const auto& n = desc_.nodes[i];
      switch (n.kind) {
        case NodeKind::Conv: {
          const auto& c = n.conv;
          add_slot(i, SlotRole::Weight,
                   Tensor<T>({c.out_ch, c.in_ch / c.groups, c.kernel, c.kernel}));
          if (c.bias) add_slot(i, SlotRole::Bias, Tensor<T>({c.out_ch}));
          break;
        }
        case NodeKind::BatchNorm:
          add_slot(i, SlotRole::Gamma, Tensor<T>({n.bn_channels}, T(1)));
          add_slot(i, SlotRole::Beta, Tensor<T>({n.bn_channels}));
          add_slot(i, SlotRole::RunningMean, Tensor<T>({n.bn_channels}));
          add_slot(i, SlotRole::RunningVar, Tensor<T>({n.bn_channels}, T(1)));
          break;
        case NodeKind::Linear:
          add_slot(i, SlotRole::Weight,
                   Tensor<T>({n.linear.out_features, n.linear.in_features}));
          if (n.linear.bias) add_slot(i, SlotRole::Bias, Tensor<T>({n.linear.out_features}));
          break;
        default:
          break;
      }
    }
  }

  const NetworkDescriptor& descriptor() const noexcept { return desc_; }
  const std::vector<Shape>& node_shapes() const noexcept { return shapes_; }
  Shape input_shape() const { return desc_.input_shape; }

  std::vector<ParamSlot<T>>& slots() noexcept { return slots_; }
  const std::vector<ParamSlot<T>>& slots() const noexcept { return slots_; }

  std::size_t slot_index(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (slots_[i].name == name) return i;
    throw InputError("no parameter slot named '" + name + "'");
  }
  ParamSlot<T>& slot(const std::string& name) { return slots_[slot_index(name)]; }
  const ParamSlot<T>& slot(const std::string& name) const { return slots_[slot_index(name)]; }

  /// Slot indices owned by node `node_index`, in declaration order.
  const std::vector<std::size_t>& node_slots(std::size_t node_index) const {
    return node_slots_.at(node_index);
  }

  Stage stage() const noexcept { return stage_; }
  void set_stage(Stage s) noexcept { stage_ = s; }

  BatchNormParams<T>& batchnorm_params() noexcept { return bn_; }

  /// He-normal initialization of conv/linear weights; zero biases; identity
  /// batch norm.
  void init_parameters(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& s : slots_) {
      if (s.encoding != Encoding::F32) continue;
      switch (s.role) {
        case SlotRole::Weight: {
          const std::size_t fan_in = s.value.numel() / s.value.dim(0);
          std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
          for (auto& v : s.value.storage()) v = static_cast<T>(dist(rng));
          break;
        }
        case SlotRole::Gamma:
        case SlotRole::RunningVar:
          s.value.fill(T(1));
          break;
        default:
          s.value.fill(T(0));
      }
    }
  }

  /// Installs a frozen sign pattern; value becomes alpha * B.
  void set_pattern(std::size_t slot_index, BinaryPattern<T> p) {
    auto& s = slots_.at(slot_index);
    if (p.weight_shape != s.value.shape()) {
      throw ShapeError("pattern shape " + to_string(p.weight_shape) +
                       " does not match slot '" + s.name + "' " + to_string(s.value.shape()));
    }
    s.value = p.reconstruct();
    s.pattern = std::move(p);
    s.quant.reset();
    s.encoding = Encoding::BIN1;
    s.frozen_pattern = true;
  }

  void set_quant(std::size_t slot_index, Quant8Block<T> q) {
    auto& s = slots_.at(slot_index);
    if (q.shape != s.value.shape()) {
      throw ShapeError("quantized block shape does not match slot '" + s.name + "'");
    }
    s.value = q.dequantize();
    s.quant = std::move(q);
    s.pattern.reset();
    s.encoding = Encoding::Q8;
    s.frozen_pattern = false;
  }

  /// Recomputes value from alpha after the scales changed.
  void refresh_pattern(std::size_t slot_index) {
    auto& s = slots_.at(slot_index);
    if (!s.pattern) throw UsageError("slot '" + s.name + "' has no pattern");
    s.value = s.pattern->reconstruct();
  }

  Tensor<T> forward(const Tensor<T>& input, Mode mode) {
    check_input(input);
    const bool train = mode == Mode::Train;
    std::vector<Tensor<T>> outs(desc_.nodes.size());
    std::vector<BatchNormCache<T>> bn_caches(train ? desc_.nodes.size() : 0);
    for (std::size_t i = 0; i < desc_.nodes.size(); ++i) {
      const auto& n = desc_.nodes[i];
      const Tensor<T>& x = resolve(i, 0, input, outs);
      const auto& ns = node_slots_[i];
      switch (n.kind) {
        case NodeKind::Conv: {
          std::span<const T> bias;
          if (n.conv.bias) bias = slots_[ns[1]].value.data();
          outs[i] = conv2d(x, slots_[ns[0]].value, bias, n.conv.params());
          break;
        }
        case NodeKind::BatchNorm: {
          auto& g = slots_[ns[0]].value;
          auto& b = slots_[ns[1]].value;
          auto& rm = slots_[ns[2]].value;
          auto& rv = slots_[ns[3]].value;
          if (train) {
            outs[i] = batchnorm2d_train<T>(x, g.data(), b.data(), rm.data(), rv.data(), bn_,
                                           &bn_caches[i]);
          } else {
            outs[i] = batchnorm2d_eval<T>(x, g.data(), b.data(), rm.data(), rv.data(), bn_.eps);
          }
          break;
        }
        case NodeKind::ReLU:
          outs[i] = relu(x);
          break;
        case NodeKind::Add:
          outs[i] = add(x, resolve(i, 1, input, outs));
          break;
        case NodeKind::GlobalAvgPool:
          outs[i] = global_avgpool(x);
          break;
        case NodeKind::AvgPool:
          outs[i] = avgpool2d(x, n.pool.kernel, n.pool.stride);
          break;
        case NodeKind::DownsamplePad:
          outs[i] = downsample_pad(x, n.downsample.stride, n.downsample.out_channels);
          break;
        case NodeKind::Linear: {
          std::span<const T> bias;
          if (n.linear.bias) bias = slots_[ns[1]].value.data();
          outs[i] = linear(x, slots_[ns[0]].value, bias);
          break;
        }
        case NodeKind::Softmax:
          outs[i] = softmax(x.rank() == 2 ? x : x.reshaped({x.dim(0), x.numel() / x.dim(0)}));
          break;
      }
    }
    Tensor<T> result = outs.back();
    if (train) {
      cache_.input = input;
      cache_.outputs = std::move(outs);
      cache_.bn = std::move(bn_caches);
      cache_.valid = true;
    } else {
      cache_ = {};
    }
    return result;
  }

  /// Back-propagates d(loss)/d(output) through the most recent train-mode
  /// forward pass. Frozen patterns receive only d(loss)/d(alpha).
  Gradients<T> backward(const Tensor<T>& grad_output) {
    if (!cache_.valid) throw UsageError("backward() requires a preceding forward() in train mode");
    if (grad_output.shape() != cache_.outputs.back().shape()) {
      throw ShapeError("backward: grad_output " + to_string(grad_output.shape()) +
                       " vs network output " + to_string(cache_.outputs.back().shape()));
    }
    const std::size_t count = desc_.nodes.size();
    std::vector<Tensor<T>> grads(count);
    Tensor<T> input_grad;
    grads.back() = grad_output;
    Gradients<T> pg(slots_.size());
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (slots_[s].is_parameter()) pg[s].dense = Tensor<T>(slots_[s].value.shape());
    }
    auto accumulate = [&](std::size_t node, std::size_t which, Tensor<T> g) {
      const std::ptrdiff_t src = inputs_[node][which];
      Tensor<T>& dst = src < 0 ? input_grad : grads[static_cast<std::size_t>(src)];
      if (dst.empty()) {
        dst = std::move(g);
      } else {
        for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] += g[k];
      }
    };

    for (std::size_t ii = count; ii-- > 0;) {
      if (grads[ii].empty()) continue;
      const auto& n = desc_.nodes[ii];
      const Tensor<T>& gy = grads[ii];
      const Tensor<T>& x = resolve(ii, 0, cache_.input, cache_.outputs);
      const auto& ns = node_slots_[ii];
      switch (n.kind) {
        case NodeKind::Conv: {
          auto r = conv2d_backward(gy, x, slots_[ns[0]].value, n.conv.params());
          pg[ns[0]].dense = std::move(r.grad_weight);
          if (n.conv.bias) pg[ns[1]].dense = std::move(r.grad_bias);
          accumulate(ii, 0, std::move(r.grad_input));
          break;
        }
        case NodeKind::BatchNorm: {
          auto r = batchnorm2d_backward<T>(gy, cache_.bn[ii], slots_[ns[0]].value.data());
          pg[ns[0]].dense = Tensor<T>(slots_[ns[0]].value.shape(), std::move(r.grad_gamma));
          pg[ns[1]].dense = Tensor<T>(slots_[ns[1]].value.shape(), std::move(r.grad_beta));
          accumulate(ii, 0, std::move(r.grad_input));
          break;
        }
        case NodeKind::ReLU:
          accumulate(ii, 0, relu_backward(gy, x));
          break;
        case NodeKind::Add:
          accumulate(ii, 0, gy);
          accumulate(ii, 1, gy);
          break;
        case NodeKind::GlobalAvgPool:
          accumulate(ii, 0, global_avgpool_backward(gy, x.shape()));
          break;
        case NodeKind::AvgPool:
          accumulate(ii, 0, avgpool2d_backward(gy, x.shape(), n.pool.kernel, n.pool.stride));
          break;
        case NodeKind::DownsamplePad:
          accumulate(ii, 0, downsample_pad_backward(gy, x.shape(), n.downsample.stride));
          break;
        case NodeKind::Linear: {
          auto r = linear_backward(gy, x, slots_[ns[0]].value);
          pg[ns[0]].dense = std::move(r.grad_weight);
          if (n.linear.bias) pg[ns[1]].dense = std::move(r.grad_bias);
          accumulate(ii, 0, std::move(r.grad_input));
          break;
        }
        case NodeKind::Softmax: {
          const Tensor<T>& p = cache_.outputs[ii];
          const std::size_t b = p.dim(0), c = p.dim(1);
          Tensor<T> gx(p.shape());
          for (std::size_t r = 0; r < b; ++r) {
            T dot = 0;
            for (std::size_t k = 0; k < c; ++k) dot += gy[r * c + k] * p[r * c + k];
            for (std::size_t k = 0; k < c; ++k) gx[r * c + k] = p[r * c + k] * (gy[r * c + k] - dot);
          }
          accumulate(ii, 0, gx.reshaped(x.shape()));
          break;
        }
      }
    }
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (slots_[s].frozen_pattern) {
        pg[s].alpha = alpha_gradient(pg[s].dense, *slots_[s].pattern);
        pg[s].dense = Tensor<T>();
      }
    }
    input_grad_ = std::move(input_grad);
    return pg;
  }

  /// d(loss)/d(input) from the last backward() call.
  const Tensor<T>& input_gradient() const noexcept { return input_grad_; }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(desc_);
    out.set_stage(stage_);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const auto& s = slots_[i];
      auto& d = out.slots()[i];
      d.value = s.value.template cast<U>();
      d.encoding = s.encoding;
      d.frozen_pattern = s.frozen_pattern;
      if (s.pattern) {
        BinaryPattern<U> p{s.pattern->weight_shape, s.pattern->granularity, s.pattern->signs,
                           std::vector<U>(s.pattern->alpha.begin(), s.pattern->alpha.end())};
        d.pattern = std::move(p);
      }
      if (s.quant) {
        Quant8Block<U> q{s.quant->shape, s.quant->per_channel, s.quant->codes,
                         std::vector<U>(s.quant->scales.begin(), s.quant->scales.end())};
        d.quant = std::move(q);
      }
    }
    return out;
  }

 private:
  struct TrainCache {
    Tensor<T> input;
    std::vector<Tensor<T>> outputs;
    std::vector<BatchNormCache<T>> bn;
    bool valid = false;
  };

  void add_slot(std::size_t node, SlotRole role, Tensor<T> value) {
    ParamSlot<T> s;
    s.owner = desc_.nodes[node].id;
    s.name = s.owner + "." + slot_role_name(role);
    s.role = role;
    s.value = std::move(value);
    node_slots_[node].push_back(slots_.size());
    slots_.push_back(std::move(s));
  }

  void check_input(const Tensor<T>& input) const {
    if (input.rank() != 4 || input.dim(1) != desc_.input_shape[0] ||
        input.dim(2) != desc_.input_shape[1] || input.dim(3) != desc_.input_shape[2]) {
      throw ShapeError("network '" + desc_.name + "' expects N x " +
                       to_string(desc_.input_shape) + " input, got " + to_string(input.shape()));
    }
  }

  const Tensor<T>& resolve(std::size_t node, std::size_t which, const Tensor<T>& input,
                           const std::vector<Tensor<T>>& outs) const {
    const std::ptrdiff_t src = inputs_[node][which];
    return src < 0 ? input : outs[static_cast<std::size_t>(src)];
  }

  NetworkDescriptor desc_;
  std::vector<Shape> shapes_;
  std::vector<ParamSlot<T>> slots_;
  std::vector<std::vector<std::ptrdiff_t>> inputs_;  // -1 is the network input
  std::vector<std::vector<std::size_t>> node_slots_;
  Stage stage_ = Stage::Full;
  BatchNormParams<T> bn_;
  TrainCache cache_;
  Tensor<T> input_grad_;
};

}  // namespace sepnet
