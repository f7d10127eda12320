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

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sepnet/arch.hpp"
#include "sepnet/compress.hpp"

using namespace sepnet;

namespace {

const LayerNode& node(const NetworkDescriptor& d, const std::string& id) {
  for (const auto& n : d.nodes)
    if (n.id == id) return n;
  throw std::runtime_error("no node " + id);
}

NetworkDescriptor single_prb(const PRBSpec& s, std::size_t hw) {
  NetworkDescriptor d;
  d.name = "prb";
  d.input_shape = {s.in_ch, hw, hw};
  build_prb(d, "p", kInputId, s);
  return d;
}

// Direct weight count of a conv, written out independently of ConvSpec.
std::size_t conv_weights(std::size_t k, std::size_t cin, std::size_t cout, std::size_t g) {
  return k * k * (cin / g) * cout;
}

}  // namespace

TEST(PRB, EqualsSumOfBranchOracles) {
  std::mt19937_64 rng(41);
  for (std::size_t k : {3u, 5u}) {
    PRBSpec s{4, 8, k, 2, (k - 1) / 2, 1};
    Network<float> net(single_prb(s, 7));
    net.init_parameters(k);
    auto x = oracle::random_tensor<float>({2, 4, 7, 7}, rng);
    auto y = net.forward(x, Mode::Eval);
    const std::string kk = std::to_string(k) + "x" + std::to_string(k);
    auto want = oracle::add(oracle::conv(x, net.slot("p/" + kk + ".weight").value, {}, (k - 1) / 2, 1, 2),
                            oracle::conv(x, net.slot("p/1x1.weight").value, {}, 0, 1, 2));
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], want[i], 1e-4);
    EXPECT_EQ(node(net.descriptor(), "p/" + kk).role, kPatternRole);
    EXPECT_TRUE(node(net.descriptor(), "p/1x1").role.empty());
  }
}

TEST(PRB, RejectsShapeIncompatibleBranches) {
  EXPECT_THROW(single_prb(PRBSpec{4, 4, 3, 1, 0, 1}, 8), ConfigError);
  EXPECT_THROW(single_prb(PRBSpec{4, 4, 4, 1, 2, 1}, 8), ConfigError);
  EXPECT_THROW(single_prb(PRBSpec{4, 4, 1, 1, 0, 1}, 8), ConfigError);
}

TEST(SepModule, MatchesHandComposedOracle) {
  std::mt19937_64 rng(42);
  SepModuleSpec s{8, 4, 8, 4, 8, 2, 1, 2, 3, true, false};
  NetworkDescriptor d;
  d.name = "mod";
  d.input_shape = {8, 5, 5};
  build_sepnet_module(d, "m", kInputId, s);
  Network<float> net(d);
  net.init_parameters(5);
  auto x = oracle::random_tensor<float>({2, 8, 5, 5}, rng);
  auto y = net.forward(x, Mode::Eval);

  auto w = [&](const std::string& n) { return net.slot(n + ".weight").value; };
  auto prb = [&](const Tensor<float>& in, const std::string& p) {
    return oracle::add(oracle::conv(in, w(p + "/3x3"), {}, 1, 1, 2), oracle::conv(in, w(p + "/1x1"), {}, 0, 1, 2));
  };
  auto a = oracle::relu(oracle::conv(x, w("m/reduce"), {}, 0, 1, 1));
  a = oracle::relu(prb(a, "m/prb1"));
  a = oracle::relu(prb(a, "m/prb2"));
  a = oracle::relu(oracle::add(oracle::conv(a, w("m/recover"), {}, 0, 1, 2), x));
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], a[i], 1e-4);
}

TEST(SepModule, ZeroWeightsWithSkipIsIdentityOnNonnegativeInput) {
  std::mt19937_64 rng(43);
  SepModuleSpec s{16, 8, 8, 4, 16, 4, 1, 1, 3, true, true};
  NetworkDescriptor d;
  d.name = "mod";
  d.input_shape = {16, 6, 6};
  build_sepnet_module(d, "m", kInputId, s);
  Network<double> net(d);  // zero weights, identity batch norm
  auto x = oracle::random_tensor<double>({2, 16, 6, 6}, rng, 0, 2);
  auto y = net.forward(x, Mode::Eval);
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_DOUBLE_EQ(y[i], x[i]);
}

TEST(SepModule, SkipNeedsMatchingChannels) {
  NetworkDescriptor d;
  d.input_shape = {8, 4, 4};
  SepModuleSpec s{8, 4, 4, 4, 16, 4, 1, 1, 3, true, true};
  EXPECT_THROW(build_sepnet_module(d, "m", kInputId, s), ConfigError);
}

TEST(SepNet, LayerTableSmallAndLarge) {
  auto small = build_sepnet(SepNetVariant::Small);
  auto large = build_sepnet(SepNetVariant::Large);
  auto shapes = infer_shapes(small);
  EXPECT_EQ(shapes.back(), (Shape{1000}));
  // Spatial pyramid: 224 -> 111 -> 56 -> 28 -> 14 -> 7.
  EXPECT_EQ(infer_shapes(small)[2], (Shape{64, 111, 111}));

  EXPECT_EQ(node(small, "conv1").conv, (ConvSpec{3, 64, 5, 1, 2, 1, false}));
  EXPECT_EQ(node(small, "conv3").conv.groups, 4u);
  EXPECT_EQ(node(small, "conv4").conv.groups, 4u);
  EXPECT_EQ(node(large, "conv4").conv.groups, 1u);
  EXPECT_EQ(node(small, "conv5").conv.out_ch, 512u);
  EXPECT_EQ(node(small, "conv5").conv.groups, 16u);
  EXPECT_EQ(node(large, "conv5").conv.out_ch, 400u);
  EXPECT_EQ(node(large, "conv5").conv.groups, 4u);
  EXPECT_EQ(node(small, "m5/reduce").conv.groups, 1u);
  EXPECT_EQ(node(large, "m5/reduce").conv.groups, 4u);
  EXPECT_EQ(node(small, "m1/prb2/3x3").conv.out_ch, 16u);
  EXPECT_EQ(node(small, "m1/prb2/3x3").conv.groups, 4u);
  EXPECT_EQ(node(small, "fc").linear, (LinearSpec{512, 1000, true}));
  // Skips only on modules 3-6.
  for (const char* m : {"m1", "m2"}) EXPECT_THROW(node(small, std::string(m) + "/skip"), std::runtime_error);
  for (const char* m : {"m3", "m4", "m5", "m6"}) EXPECT_NO_THROW(node(small, std::string(m) + "/skip"));
  auto m = [&](const std::string& id) { return node(small, id).conv.weight_count(); };
  EXPECT_EQ(m("m3/prb1/3x3"), conv_weights(3, 128, 128, 4));
}

TEST(SepNet, WidthDivisorHalvesChannels) {
  SepNetOptions o;
  o.width_divisor = 2;
  o.classes = 10;
  o.input_shape = {1, 28, 28};
  auto d = build_sepnet(SepNetVariant::Small, o);
  EXPECT_EQ(node(d, "conv1").conv.out_ch, 32u);
  EXPECT_EQ(node(d, "conv5").conv.out_ch, 256u);
  EXPECT_EQ(node(d, "fc").linear, (LinearSpec{256, 10, true}));
  o.width_divisor = 3;
  EXPECT_THROW(build_sepnet(SepNetVariant::Small, o), ConfigError);
}

TEST(ResNet, StructureAndErrors) {
  auto d = build_resnet_cifar(20);
  std::size_t convs = 0;
  for (const auto& n : d.nodes) convs += n.kind == NodeKind::Conv;
  EXPECT_EQ(convs, 19u);  // plus the final linear layer: 20 weight layers
  EXPECT_EQ(infer_shapes(d).back(), (Shape{10}));
  EXPECT_EQ(node(d, "fc").linear.in_features, 64u * 6 * 6);
  EXPECT_EQ(node(d, "s2b1/down").downsample, (DownsampleSpec{2, 32}));
  for (std::size_t bad : {0u, 18u, 21u, 110u}) EXPECT_THROW(build_resnet_cifar(bad), InputError);
  ResNetOptions o;
  o.head = ResNetHead::GlobalLinear;
  EXPECT_EQ(node(build_resnet_cifar(32, o), "fc").linear.in_features, 64u);
}

TEST(ParamCount, ResNetFromClosedForm) {
  // conv1 + 3 stages of 2n convs + BN (2 per channel) + linear 2304 -> 10.
  for (std::size_t depth : {20u, 32u, 44u, 56u}) {
    const std::size_t n = (depth - 2) / 6;
    std::size_t want = conv_weights(3, 3, 16, 1) + 2 * 16;
    std::size_t in = 16;
    for (std::size_t c : {16u, 32u, 64u}) {
      want += conv_weights(3, in, c, 1) + conv_weights(3, c, c, 1) * (2 * n - 1) + 2 * c * 2 * n;
      in = c;
    }
    want += 2304 * 10 + 10;
    EXPECT_EQ(count_params(build_resnet_cifar(depth)), want) << depth;
    Network<float> net(build_resnet_cifar(depth));
    EXPECT_EQ(count_params(net, CountMode::Full), want);
  }
}

TEST(ParamCount, EffectiveCountsOneScalePerGroup) {
  Network<float> net(build_resnet_cifar(20));
  const std::size_t full = count_params(net, CountMode::Full);
  binarize_network(net, parse_scope("k>1"), AlphaGranularity::PerFilter);
  std::size_t conv_w = 0, filters = 0;
  for (const auto& n : net.descriptor().nodes)
    if (n.kind == NodeKind::Conv) {
      conv_w += n.conv.weight_count();
      filters += n.conv.out_ch;
    }
  EXPECT_EQ(count_params(net, CountMode::Effective), full - conv_w + filters);
  EXPECT_EQ(count_params(net, CountMode::Full), full);
}

TEST(GroupConv, ParamsDivideByGroupCount) {
  EXPECT_EQ((ConvSpec{256, 256, 3, 1, 1, 4, false}.weight_count()), 147456u);
  EXPECT_EQ(9u * 256 * 256 / 4, 147456u);
  std::mt19937_64 rng(44);
  for (int t = 0; t < 200; ++t) {
    const std::size_t g = std::size_t{1} << (rng() % 5);
    const std::size_t cin = g * (1 + rng() % 8), cout = g * (1 + rng() % 8);
    const std::size_t k = 1 + 2 * (rng() % 3);
    EXPECT_EQ((ConvSpec{cin, cout, k, 0, 1, g, false}.weight_count()) * g,
              (ConvSpec{cin, cout, k, 0, 1, 1, false}.weight_count()));
  }
}

TEST(Builders, NamedArchitectures) {
  EXPECT_EQ(build_named("resnet44").name, "resnet44");
  EXPECT_EQ(build_named("sepnet-large").name, "sepnet-large");
  EXPECT_THROW(build_named("vgg16"), InputError);
}
