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
#include "sepnet/pattern.hpp"

using namespace sepnet;

TEST(Binarize, HandWorkedFilter) {
  // |w| mean is 2.5; signs follow w; error sums (|w| - 2.5)^2 = 5.
  Tensor<double> w({1, 1, 2, 2}, {1.0, -2.0, 3.0, -4.0});
  auto r = binarize_filter(w.reshaped({1, 2, 2}));
  EXPECT_DOUBLE_EQ(r.pattern.alpha[0], 2.5);
  EXPECT_DOUBLE_EQ(r.error, 5.0);
  const double signs[] = {1, -1, 1, -1};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.pattern.sign(0, j), signs[j]);
  EXPECT_EQ(r.pattern.weight_shape, (Shape{1, 1, 2, 2}));
}

TEST(Binarize, ZeroFilterIsAllPlusWithZeroScale) {
  auto r = binarize_filter(Tensor<float>({2, 3, 3}));
  EXPECT_EQ(r.pattern.alpha[0], 0.f);
  EXPECT_EQ(r.error, 0.f);
  for (std::size_t j = 0; j < 18; ++j) EXPECT_TRUE(r.pattern.positive(0, j));
}

TEST(Binarize, EmptyFilterThrows) {
  EXPECT_THROW(binarize_filter(Tensor<float>()), InputError);
  EXPECT_THROW(binarize_weight(Tensor<float>()), InputError);
}

TEST(Binarize, SignBitsArePackedLsbFirstPerFilter) {
  // Two 1x3x3 filters: 9 weights each -> 2 bytes each.
  Tensor<float> w({2, 1, 3, 3}, -1.f);
  w[0] = 1.f;   // filter 0, bit 0 of byte 0
  w[8] = 1.f;   // filter 0, bit 0 of byte 1
  w[9 + 3] = 1.f;  // filter 1, bit 3 of byte 2
  auto r = binarize_weight(w);
  ASSERT_EQ(r.pattern.signs.size(), 4u);
  EXPECT_EQ(r.pattern.signs[0], 0x01);
  EXPECT_EQ(r.pattern.signs[1], 0x01);
  EXPECT_EQ(r.pattern.signs[2], 0x08);
  EXPECT_EQ(r.pattern.signs[3], 0x00);
}

TEST(Binarize, ExhaustiveSearchNeverBeatsClosedForm) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> pick(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = static_cast<std::size_t>(pick(rng));
    auto f = oracle::random_tensor<double>({n, 1, 1}, rng);
    auto r = binarize_filter(f);
    const std::vector<double> w(f.data().begin(), f.data().end());
    EXPECT_LE(r.error, oracle::exhaustive_binarization_error(w) * (1 + 1e-12) + 1e-15);
  }
}

TEST(Binarize, ErrorsMatchDirectComputation) {
  std::mt19937_64 rng(22);
  auto w = oracle::random_tensor<double>({4, 3, 3, 3}, rng);
  for (auto g : {AlphaGranularity::PerFilter, AlphaGranularity::PerKernel}) {
    auto r = binarize_weight(w, g);
    const auto rec = r.pattern.reconstruct();
    const std::size_t group = g == AlphaGranularity::PerFilter ? 27 : 9;
    ASSERT_EQ(r.errors.size(), 108 / group);
    for (std::size_t a = 0; a < r.errors.size(); ++a) {
      double e = 0, mean_abs = 0;
      for (std::size_t j = a * group; j < (a + 1) * group; ++j) {
        e += (w[j] - rec[j]) * (w[j] - rec[j]);
        mean_abs += std::abs(w[j]) / double(group);
      }
      EXPECT_NEAR(r.errors[a], e, 1e-12);
      EXPECT_NEAR(r.pattern.alpha[a], mean_abs, 1e-12);
    }
  }
}

TEST(Binarize, PerKernelNeverWorseThanPerFilter) {
  std::mt19937_64 rng(23);
  auto w = oracle::random_tensor<double>({8, 4, 3, 3}, rng);
  auto pf = binarize_weight(w, AlphaGranularity::PerFilter);
  auto pk = binarize_weight(w, AlphaGranularity::PerKernel);
  double ef = 0, ek = 0;
  for (double e : pf.errors) ef += e;
  for (double e : pk.errors) ek += e;
  EXPECT_LE(ek, ef + 1e-12);
  EXPECT_EQ(pf.pattern.signs, pk.pattern.signs);
  EXPECT_EQ(pk.pattern.alpha_count(), 32u);
}

TEST(Binarize, AlphaGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(24);
  auto w = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
  auto gw = oracle::random_tensor<double>({3, 2, 3, 3}, rng);  // dL/dW for L = <gw, W>
  for (auto g : {AlphaGranularity::PerFilter, AlphaGranularity::PerKernel}) {
    auto p = binarize_weight(w, g).pattern;
    auto analytic = alpha_gradient(gw, p);
    auto f = [&] {
      const auto rec = p.reconstruct();
      double s = 0;
      for (std::size_t i = 0; i < rec.numel(); ++i) s += gw[i] * rec[i];
      return s;
    };
    auto numeric = oracle::numeric_gradient(p.alpha, f);
    EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-8);
  }
  EXPECT_THROW(alpha_gradient(Tensor<double>({1, 1, 1, 1}), binarize_weight(w).pattern), ShapeError);
}

TEST(Quant8, ErrorBoundedByHalfScale) {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = oracle::random_tensor<float>({6, 4, 3}, rng, -5, 5);
    for (bool per_channel : {false, true}) {
      auto q = quantize8_tensor(t, per_channel);
      EXPECT_EQ(q.scales.size(), per_channel ? 6u : 1u);
      auto d = q.dequantize();
      for (std::size_t i = 0; i < t.numel(); ++i) {
        ASSERT_LE(std::abs(double(t[i]) - double(d[i])), double(q.scale_for(i)) / 2 * (1 + 1e-6));
        ASSERT_LE(std::abs(int(q.codes[i])), 127);
      }
    }
  }
}

TEST(Quant8, ExtremesAndZeros) {
  Tensor<float> t({4}, {-2.f, 0.f, 0.5f, 2.f});
  auto q = quantize8_tensor(t);
  EXPECT_FLOAT_EQ(q.scales[0], 2.f / 127);
  EXPECT_EQ(q.codes[0], -127);
  EXPECT_EQ(q.codes[3], 127);
  EXPECT_EQ(q.codes[1], 0);
  EXPECT_EQ(q.codes[2], 32);  // 0.5 / (2 / 127) = 31.75
  auto z = quantize8_tensor(Tensor<float>({3}));
  EXPECT_EQ(z.scales[0], 1.f);
  EXPECT_EQ(z.dequantize(), Tensor<float>({3}));
  EXPECT_THROW(quantize8_tensor(Tensor<float>()), InputError);
}
