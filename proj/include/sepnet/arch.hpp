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

// Network builders: pattern residual blocks, SEP-Net modules, the two
// SEP-Net variants and the CIFAR ResNet family, plus parameter counting.

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sepnet/graph.hpp"

namespace sepnet {

// ---------------------------------------------------------------------------
// Node helpers. Each appends one node and returns its id.

inline std::string add_conv(NetworkDescriptor& d, std::string id, std::string input,
                            const ConvSpec& spec, std::string role = {}) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = NodeKind::Conv;
  n.inputs = {std::move(input)};
  n.conv = spec;
  n.role = std::move(role);
  d.nodes.push_back(std::move(n));
  return d.nodes.back().id;
}

inline std::string add_simple(NetworkDescriptor& d, std::string id, NodeKind kind,
                              std::vector<std::string> inputs) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = kind;
  n.inputs = std::move(inputs);
  d.nodes.push_back(std::move(n));
  return d.nodes.back().id;
}

inline std::string add_batchnorm(NetworkDescriptor& d, std::string id, std::string input,
                                 std::size_t channels) {
  auto out = add_simple(d, std::move(id), NodeKind::BatchNorm, {std::move(input)});
  d.nodes.back().bn_channels = channels;
  return out;
}

inline std::string add_relu(NetworkDescriptor& d, std::string id, std::string input) {
  return add_simple(d, std::move(id), NodeKind::ReLU, {std::move(input)});
}

inline std::string add_sum(NetworkDescriptor& d, std::string id, std::string a, std::string b) {
  return add_simple(d, std::move(id), NodeKind::Add, {std::move(a), std::move(b)});
}

inline std::string add_linear(NetworkDescriptor& d, std::string id, std::string input,
                              std::size_t in_features, std::size_t out_features,
                              bool bias = true) {
  auto out = add_simple(d, std::move(id), NodeKind::Linear, {std::move(input)});
  d.nodes.back().linear = {in_features, out_features, bias};
  return out;
}

// conv -> batch norm -> relu
inline std::string add_conv_bn_relu(NetworkDescriptor& d, const std::string& id,
                                    std::string input, const ConvSpec& spec) {
  auto c = add_conv(d, id, std::move(input), spec);
  auto b = add_batchnorm(d, id + "/bn", c, spec.out_ch);
  return add_relu(d, id + "/relu", b);
}

// ---------------------------------------------------------------------------
// Pattern residual block: O(x) = C_kxk(x) + C_1x1(x).

struct PRBSpec {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t k = 3;
  std::size_t groups = 1;
  std::size_t pad = 1;
  std::size_t stride = 1;
};

/// Appends the two parallel branches and their sum; returns the sum's id.
/// The k x k branch is tagged with the "pattern" role. Both branches are
/// bias-free and share `groups`.
inline std::string build_prb(NetworkDescriptor& d, const std::string& prefix,
                             const std::string& input, const PRBSpec& spec) {
  if (spec.k < 2) throw ConfigError("PRB '" + prefix + "': pattern kernel must be > 1");
  if (spec.k % 2 == 0 || 2 * spec.pad != spec.k - 1) {
    throw ConfigError("PRB '" + prefix + "': k=" + std::to_string(spec.k) + " pad=" +
                      std::to_string(spec.pad) +
                      " gives a different output size than the 1x1 branch");
  }
  const ConvSpec kxk{spec.in_ch, spec.out_ch, spec.k, spec.pad, spec.stride, spec.groups, false};
  const ConvSpec one{spec.in_ch, spec.out_ch, 1, 0, spec.stride, spec.groups, false};
  auto a = add_conv(d, prefix + "/" + std::to_string(spec.k) + "x" + std::to_string(spec.k),
                    input, kxk, kPatternRole);
  auto b = add_conv(d, prefix + "/1x1", input, one);
  return add_sum(d, prefix + "/sum", a, b);
}

// ---------------------------------------------------------------------------
// SEP-Net module: 1x1 reduce -> PRB -> PRB -> 1x1 recover (+ identity skip).

struct SepModuleSpec {
  std::size_t in_ch = 0;
  std::size_t reduce_ch = 0;
  std::size_t prb1_ch = 0;
  std::size_t prb2_ch = 0;
  std::size_t out_ch = 0;
  std::size_t groups = 4;          // both PRBs
  std::size_t reduce_groups = 1;
  std::size_t recover_groups = 1;
  std::size_t k = 3;
  bool skip = false;
  bool batchnorm = true;           // BN after each stage, before the ReLU
};

inline std::string build_sepnet_module(NetworkDescriptor& d, const std::string& prefix,
                                       const std::string& input, const SepModuleSpec& s) {
  if (s.skip && s.out_ch != s.in_ch) {
    throw ConfigError("SEP module '" + prefix + "': skip needs out_ch == in_ch (" +
                      std::to_string(s.out_ch) + " vs " + std::to_string(s.in_ch) + ")");
  }
  auto post = [&](const std::string& id, std::string x, std::size_t ch, bool relu) {
    if (s.batchnorm) x = add_batchnorm(d, id + "/bn", x, ch);
    return relu ? add_relu(d, id + "/relu", x) : x;
  };
  auto x = add_conv(d, prefix + "/reduce", input,
                    ConvSpec{s.in_ch, s.reduce_ch, 1, 0, 1, s.reduce_groups, false});
  x = post(prefix + "/reduce", x, s.reduce_ch, true);
  x = build_prb(d, prefix + "/prb1", x,
                PRBSpec{s.reduce_ch, s.prb1_ch, s.k, s.groups, (s.k - 1) / 2, 1});
  x = post(prefix + "/prb1", x, s.prb1_ch, true);
  x = build_prb(d, prefix + "/prb2", x,
                PRBSpec{s.prb1_ch, s.prb2_ch, s.k, s.groups, (s.k - 1) / 2, 1});
  x = post(prefix + "/prb2", x, s.prb2_ch, true);
  x = add_conv(d, prefix + "/recover", x,
               ConvSpec{s.prb2_ch, s.out_ch, 1, 0, 1, s.recover_groups, false});
  x = post(prefix + "/recover", x, s.out_ch, false);
  if (s.skip) x = add_sum(d, prefix + "/skip", x, input);
  return add_relu(d, prefix + "/out", x);
}

// ---------------------------------------------------------------------------
// SEP-Net.

enum class SepNetVariant { Large, Small };

struct SepNetOptions {
  std::size_t width_divisor = 1;   // divides every channel count
  std::size_t classes = 1000;
  Shape input_shape{3, 224, 224};
};

/// Layer-for-layer SEP-Net. Large: 400-channel conv5 with 4 groups, dense
/// conv4, grouped module-5 reduction. Small: 512-channel conv5 with 16
/// groups, conv4 with 4 groups. Modules 3-6 carry identity skips.
inline NetworkDescriptor build_sepnet(SepNetVariant variant, const SepNetOptions& opt = {}) {
  const bool large = variant == SepNetVariant::Large;
  const std::size_t dv = opt.width_divisor;
  auto ch = [&](std::size_t c) {
    if (dv == 0 || c % dv) throw ConfigError("width divisor " + std::to_string(dv) +
                                             " does not divide " + std::to_string(c));
    return c / dv;
  };
  NetworkDescriptor d;
  d.name = std::string(large ? "sepnet-large" : "sepnet-small") +
           (dv > 1 ? "-w" + std::to_string(dv) : "");
  d.input_shape = opt.input_shape;
  d.class_count = opt.classes;

  struct Module {
    std::size_t reduce, prb1, prb2, out, reduce_groups;
    bool skip;
  };
  auto module = [&](const std::string& name, const std::string& in, std::size_t in_ch,
                    const Module& m) {
    SepModuleSpec s;
    s.in_ch = in_ch;
    s.reduce_ch = ch(m.reduce);
    s.prb1_ch = ch(m.prb1);
    s.prb2_ch = ch(m.prb2);
    s.out_ch = ch(m.out);
    s.groups = 4;
    s.reduce_groups = m.reduce_groups;
    s.skip = m.skip;
    return build_sepnet_module(d, name, in, s);
  };
  auto strided = [&](const std::string& name, const std::string& in, std::size_t in_ch,
                     std::size_t out, std::size_t k, std::size_t groups) {
    return add_conv_bn_relu(d, name, in, ConvSpec{in_ch, ch(out), k, 1, 2, groups, false});
  };

  auto x = strided("conv1", kInputId, opt.input_shape[0], 64, 5, 1);
  x = module("m1", x, ch(64), {32, 32, 16, 64, 1, false});
  x = strided("conv2", x, ch(64), 128, 3, 1);
  x = module("m2", x, ch(128), {64, 64, 32, 128, 1, false});
  x = strided("conv3", x, ch(128), 256, 3, 4);
  x = module("m3", x, ch(256), {128, 128, 64, 256, 1, true});
  x = module("m4", x, ch(256), {128, 128, 64, 256, 1, true});
  x = strided("conv4", x, ch(256), 256, 3, large ? 1 : 4);
  x = module("m5", x, ch(256), {128, 128, 64, 256, std::size_t(large ? 4 : 1), true});
  x = module("m6", x, ch(256), {128, 128, 64, 256, 1, true});
  const std::size_t last = large ? 400 : 512;
  x = strided("conv5", x, ch(256), last, 3, large ? 4 : 16);
  x = add_simple(d, "pool", NodeKind::GlobalAvgPool, {x});
  add_linear(d, "fc", x, ch(last), opt.classes);
  validate(d);
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR ResNet (6n + 2 layers, 16/32/64 channels, option-A shortcuts).

enum class ResNetHead {
  PooledLinear,  // 3x3 stride-1 average pool over the 8x8 map, then linear
  GlobalLinear,  // global average pool, then linear
};

struct ResNetOptions {
  std::size_t classes = 10;
  Shape input_shape{3, 32, 32};
  ResNetHead head = ResNetHead::PooledLinear;
};

inline NetworkDescriptor build_resnet_cifar(std::size_t depth, const ResNetOptions& opt = {}) {
  if (depth != 20 && depth != 32 && depth != 44 && depth != 56) {
    throw InputError("unsupported ResNet depth " + std::to_string(depth) +
                     " (expected 20, 32, 44 or 56)");
  }
  const std::size_t blocks = (depth - 2) / 6;
  NetworkDescriptor d;
  d.name = "resnet" + std::to_string(depth);
  d.input_shape = opt.input_shape;
  d.class_count = opt.classes;

  auto x = add_conv_bn_relu(d, "conv1", kInputId, ConvSpec{opt.input_shape[0], 16, 3, 1, 1, 1, false});
  std::size_t in_ch = 16;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t out_ch = std::size_t{16} << stage;
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string p = "s" + std::to_string(stage + 1) + "b" + std::to_string(b + 1);
      auto y = add_conv_bn_relu(d, p + "/c1", x, ConvSpec{in_ch, out_ch, 3, 1, stride, 1, false});
      y = add_conv(d, p + "/c2", y, ConvSpec{out_ch, out_ch, 3, 1, 1, 1, false});
      y = add_batchnorm(d, p + "/c2/bn", y, out_ch);
      std::string shortcut = x;
      if (stride != 1 || in_ch != out_ch) {
        shortcut = add_simple(d, p + "/down", NodeKind::DownsamplePad, {x});
        d.nodes.back().downsample = {stride, out_ch};
      }
      y = add_sum(d, p + "/sum", y, shortcut);
      x = add_relu(d, p + "/relu", y);
      in_ch = out_ch;
    }
  }
  const auto shapes = infer_shapes(d);
  const Shape last = shapes.back();
  if (opt.head == ResNetHead::PooledLinear) {
    x = add_simple(d, "pool", NodeKind::AvgPool, {x});
    d.nodes.back().pool = {3, 1};
    const std::size_t h = last[1] - 2, w = last[2] - 2;
    add_linear(d, "fc", x, in_ch * h * w, opt.classes);
  } else {
    x = add_simple(d, "pool", NodeKind::GlobalAvgPool, {x});
    add_linear(d, "fc", x, in_ch, opt.classes);
  }
  validate(d);
  return d;
}

// ---------------------------------------------------------------------------
// Architecture names used on the command line.

inline NetworkDescriptor build_named(const std::string& arch, std::size_t classes = 0,
                                     std::optional<Shape> input_shape = std::nullopt,
                                     std::size_t width_divisor = 1) {
  if (arch == "sepnet-small" || arch == "sepnet-large") {
    SepNetOptions o;
    o.width_divisor = width_divisor;
    if (classes) o.classes = classes;
    if (input_shape) o.input_shape = *input_shape;
    return build_sepnet(arch == "sepnet-large" ? SepNetVariant::Large : SepNetVariant::Small, o);
  }
  for (std::size_t depth : {20, 32, 44, 56}) {
    if (arch == "resnet" + std::to_string(depth)) {
      ResNetOptions o;
      if (classes) o.classes = classes;
      if (input_shape) o.input_shape = *input_shape;
      return build_resnet_cifar(depth, o);
    }
  }
  throw InputError("unknown architecture '" + arch +
                   "' (sepnet-small, sepnet-large, resnet20, resnet32, resnet44, resnet56)");
}

// ---------------------------------------------------------------------------
// Parameter counting. Batch-norm affine terms are parameters, running
// statistics are not.

enum class CountMode { Full, Effective };

inline std::size_t count_params(const NetworkDescriptor& d) {
  std::size_t total = 0;
  for (const auto& n : d.nodes) {
    switch (n.kind) {
      case NodeKind::Conv:
        total += n.conv.weight_count() + (n.conv.bias ? n.conv.out_ch : 0);
        break;
      case NodeKind::BatchNorm:
        total += 2 * n.bn_channels;
        break;
      case NodeKind::Linear:
        total += n.linear.in_features * n.linear.out_features +
                 (n.linear.bias ? n.linear.out_features : 0);
        break;
      default:
        break;
    }
  }
  return total;
}

/// Full: every stored real. Effective: a binarized slot counts one per scale.
template <typename T>
std::size_t count_params(const Network<T>& net, CountMode mode) {
  std::size_t total = 0;
  for (const auto& s : net.slots()) {
    if (!s.is_parameter()) continue;
    if (mode == CountMode::Effective && s.encoding == Encoding::BIN1) {
      total += s.pattern->alpha_count();
    } else {
      total += s.value.numel();
    }
  }
  return total;
}

}  // namespace sepnet
