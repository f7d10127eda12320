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
#include <vector>

#include "oracles.hpp"
#include "sepnet/ops.hpp"

using namespace sepnet;

namespace {

// Weighted sum with fixed random coefficients: a scalar loss whose gradient
// with respect to the output is exactly `coef`.
struct Probe {
  std::vector<double> coef;
  Probe(std::size_t n, std::mt19937_64& rng) : coef(n) {
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& c : coef) c = d(rng);
  }
  double operator()(const Tensor<double>& y) const {
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += coef[i] * y[i];
    return s;
  }
  Tensor<double> grad(const Shape& s) const { return Tensor<double>(s, coef); }
};

std::vector<double> as_vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor<float> t({2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
  EXPECT_EQ(t.rank(), 4u);
  t.at(1, 2, 3, 4) = 7.f;
  EXPECT_EQ(t[119], 7.f);
  EXPECT_THROW(t.at(2, 0, 0, 0), ShapeError);
  EXPECT_THROW(t[120], ShapeError);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_TRUE(Tensor<float>().empty());
  EXPECT_EQ(t.reshaped({120}).numel(), 120u);
  EXPECT_THROW(t.reshaped({7}), ShapeError);
  EXPECT_EQ(t.cast<double>().cast<float>(), t);
}

TEST(Conv2d, MatchesDirectOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(0, 1000);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t groups = std::vector<std::size_t>{1, 2, 4}[pick(rng) % 3];
    const std::size_t cg = 1 + pick(rng) % 3, og = 1 + pick(rng) % 3;
    const std::size_t k = std::vector<std::size_t>{1, 3, 5}[pick(rng) % 3];
    const std::size_t pad = pick(rng) % (k / 2 + 1), stride = 1 + pick(rng) % 2;
    const std::size_t h = k + pick(rng) % 6, w = k + pick(rng) % 6, n = 1 + pick(rng) % 3;
    auto x = oracle::random_tensor<float>({n, cg * groups, h, w}, rng);
    auto wt = oracle::random_tensor<float>({og * groups, cg, k, k}, rng);
    auto b = oracle::random_tensor<float>({og * groups}, rng);
    const std::vector<float> bias(b.data().begin(), b.data().end());
    auto got = conv2d<float>(x, wt, bias, {pad, stride, groups});
    auto want = oracle::conv(x, wt, bias, pad, stride, groups);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got[i], want[i], 1e-4) << trial;
  }
}

TEST(Conv2d, GroupedEqualsBlockDiagonalDense) {
  std::mt19937_64 rng(12);
  for (std::size_t groups : {2u, 4u, 8u}) {
    auto x = oracle::random_tensor<double>({2, 16, 7, 7}, rng);
    auto w = oracle::random_tensor<double>({16, 16 / groups, 3, 3}, rng);
    auto grouped = conv2d<double>(x, w, {}, {1, 1, groups});
    auto dense = conv2d<double>(x, oracle::block_diagonal(w, groups), {}, {1, 1, 1});
    for (std::size_t i = 0; i < dense.numel(); ++i) ASSERT_NEAR(grouped[i], dense[i], 1e-12);
  }
}

TEST(Conv2d, DepthwiseTouchesOnlyOwnChannel) {
  // With groups == channels, output channel c depends only on input channel c.
  std::mt19937_64 rng(13);
  auto x = oracle::random_tensor<double>({1, 4, 5, 5}, rng);
  auto w = oracle::random_tensor<double>({4, 1, 3, 3}, rng);
  auto base = conv2d<double>(x, w, {}, {1, 1, 4});
  x.at(0, 2, 2, 2) += 1.0;
  auto moved = conv2d<double>(x, w, {}, {1, 1, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    double diff = 0;
    for (std::size_t i = 0; i < 25; ++i) diff += std::abs(moved[c * 25 + i] - base[c * 25 + i]);
    if (c == 2) EXPECT_GT(diff, 0); else EXPECT_EQ(diff, 0);
  }
}

TEST(Conv2d, RejectsIndivisibleGroupsAndBadShapes) {
  Tensor<float> x({1, 6, 5, 5});
  EXPECT_THROW(conv2d<float>(x, Tensor<float>({4, 2, 3, 3}), {}, {1, 1, 4}), Error);
  EXPECT_THROW(conv2d<float>(x, Tensor<float>({4, 5, 3, 3}), {}, {1, 1, 1}), ShapeError);
  EXPECT_THROW(conv2d<float>(x, Tensor<float>({4, 6, 7, 7}), {}, {0, 1, 1}), ShapeError);
}

TEST(Conv2d, LargeBatchChunksAgreeWithSingleImages) {
  std::mt19937_64 rng(14);
  auto x = oracle::random_tensor<float>({40, 3, 32, 32}, rng);
  auto w = oracle::random_tensor<float>({8, 3, 3, 3}, rng);
  auto all = conv2d<float>(x, w, {}, {1, 1, 1});
  Tensor<float> one({1, 3, 32, 32});
  for (std::size_t n : {0u, 17u, 39u}) {
    std::copy_n(x.ptr() + n * 3072, 3072, one.ptr());
    auto y = conv2d<float>(one, w, {}, {1, 1, 1});
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y[i], all[n * y.numel() + i]);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (auto [groups, k, pad, stride] : std::vector<std::array<std::size_t, 4>>{
           {1, 3, 1, 1}, {2, 3, 0, 2}, {4, 1, 0, 1}, {1, 5, 2, 2}}) {
    auto x = oracle::random_tensor<double>({2, 4, 6, 6}, rng);
    auto w = oracle::random_tensor<double>({4, 4 / groups, k, k}, rng);
    std::vector<double> b(4, 0.3);
    const ConvParams p{pad, stride, groups};
    auto y = conv2d<double>(x, w, b, p);
    Probe probe(y.numel(), rng);
    auto f = [&] { return probe(conv2d<double>(x, w, b, p)); };
    auto g = conv2d_backward<double>(probe.grad(y.shape()), x, w, p);
    EXPECT_LT(oracle::relative_error(as_vec(g.grad_input), oracle::numeric_gradient(x.storage(), f)), 1e-6);
    EXPECT_LT(oracle::relative_error(as_vec(g.grad_weight), oracle::numeric_gradient(w.storage(), f)), 1e-6);
    EXPECT_LT(oracle::relative_error(as_vec(g.grad_bias), oracle::numeric_gradient(b, f)), 1e-6);
  }
}

TEST(BatchNorm, TrainModeUsesBatchStatistics) {
  std::mt19937_64 rng(16);
  auto x = oracle::random_tensor<double>({3, 2, 4, 4}, rng, -2, 3);
  std::vector<double> gamma{1.5, 0.5}, beta{0.1, -0.2}, rm{0, 0}, rv{1, 1};
  BatchNormParams<double> bp;
  auto y = batchnorm2d_train<double>(x, gamma, beta, rm, rv, bp, nullptr);
  std::vector<double> mean, var;
  oracle::channel_stats(x, mean, var);
  auto want = oracle::batchnorm(x, mean, var, gamma, beta, 1e-5);
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], want[i], 1e-12);
  const double m = 3 * 16;
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(rm[c], 0.1 * mean[c], 1e-12);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * var[c] * m / (m - 1), 1e-12);
  }
  // Eval mode with the running statistics.
  auto ye = batchnorm2d_eval<double>(x, gamma, beta, rm, rv, 1e-5);
  auto we = oracle::batchnorm(x, std::vector<double>(rm.begin(), rm.end()),
                              std::vector<double>(rv.begin(), rv.end()), gamma, beta, 1e-5);
  for (std::size_t i = 0; i < ye.numel(); ++i) ASSERT_NEAR(ye[i], we[i], 1e-12);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  auto x = oracle::random_tensor<double>({2, 3, 3, 3}, rng);
  std::vector<double> gamma{1.2, 0.7, -0.4}, beta{0.1, 0.2, 0.3};
  BatchNormParams<double> bp;
  auto fwd = [&] { return batchnorm2d_train<double>(x, gamma, beta, {}, {}, bp, nullptr); };
  auto y = fwd();
  Probe probe(y.numel(), rng);
  BatchNormCache<double> cache;
  batchnorm2d_train<double>(x, gamma, beta, {}, {}, bp, &cache);
  auto g = batchnorm2d_backward<double>(probe.grad(y.shape()), cache, gamma);
  auto f = [&] { return probe(fwd()); };
  EXPECT_LT(oracle::relative_error(as_vec(g.grad_input), oracle::numeric_gradient(x.storage(), f)), 1e-6);
  EXPECT_LT(oracle::relative_error(g.grad_gamma, oracle::numeric_gradient(gamma, f)), 1e-6);
  EXPECT_LT(oracle::relative_error(g.grad_beta, oracle::numeric_gradient(beta, f)), 1e-6);
}

TEST(Pooling, AverageAndGlobalAndDownsample) {
  Tensor<double> x({1, 2, 4, 4});
  for (std::size_t i = 0; i < 32; ++i) x[i] = double(i);
  auto p = avgpool2d(x, 3, 1);
  EXPECT_EQ(p.shape(), (Shape{1, 2, 2, 2}));
  EXPECT_DOUBLE_EQ(p.at(0, 0, 0, 0), (0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10) / 9.0);
  auto gp = global_avgpool(x);
  EXPECT_EQ(gp.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_DOUBLE_EQ(gp[1], (16.0 + 31.0) / 2);
  auto d = downsample_pad(x, 2, 4);
  EXPECT_EQ(d.shape(), (Shape{1, 4, 2, 2}));
  // Two zero channels are added, one before and one after the input channels.
  EXPECT_EQ(d.at(0, 0, 1, 1), 0.0);
  EXPECT_EQ(d.at(0, 1, 1, 1), x.at(0, 0, 2, 2));
  EXPECT_EQ(d.at(0, 2, 0, 1), x.at(0, 1, 0, 2));
  EXPECT_EQ(d.at(0, 3, 0, 0), 0.0);
}

TEST(Pooling, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(18);
  auto x = oracle::random_tensor<double>({2, 3, 5, 5}, rng);
  {
    auto y = avgpool2d(x, 3, 2);
    Probe pr(y.numel(), rng);
    auto g = avgpool2d_backward(pr.grad(y.shape()), x.shape(), 3, 2);
    auto f = [&] { return pr(avgpool2d(x, 3, 2)); };
    EXPECT_LT(oracle::relative_error(as_vec(g), oracle::numeric_gradient(x.storage(), f)), 1e-6);
  }
  {
    auto y = global_avgpool(x);
    Probe pr(y.numel(), rng);
    auto g = global_avgpool_backward(pr.grad(y.shape()), x.shape());
    auto f = [&] { return pr(global_avgpool(x)); };
    EXPECT_LT(oracle::relative_error(as_vec(g), oracle::numeric_gradient(x.storage(), f)), 1e-6);
  }
  {
    auto y = downsample_pad(x, 2, 6);
    Probe pr(y.numel(), rng);
    auto g = downsample_pad_backward(pr.grad(y.shape()), x.shape(), 2);
    auto f = [&] { return pr(downsample_pad(x, 2, 6)); };
    EXPECT_LT(oracle::relative_error(as_vec(g), oracle::numeric_gradient(x.storage(), f)), 1e-6);
  }
}

TEST(Linear, ForwardAndBackward) {
  std::mt19937_64 rng(19);
  auto x = oracle::random_tensor<double>({3, 2, 2, 2}, rng);
  auto w = oracle::random_tensor<double>({4, 8}, rng);
  std::vector<double> b{0.1, 0.2, 0.3, 0.4};
  auto y = linear<double>(x, w, b);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 8; ++i) acc += x[n * 8 + i] * w[o * 8 + i];
      ASSERT_NEAR(y[n * 4 + o], acc, 1e-12);
    }
  Probe pr(y.numel(), rng);
  auto g = linear_backward<double>(pr.grad(y.shape()), x, w);
  auto f = [&] { return pr(linear<double>(x, w, b)); };
  EXPECT_LT(oracle::relative_error(as_vec(g.grad_input), oracle::numeric_gradient(x.storage(), f)), 1e-6);
  EXPECT_LT(oracle::relative_error(as_vec(g.grad_weight), oracle::numeric_gradient(w.storage(), f)), 1e-6);
  EXPECT_LT(oracle::relative_error(as_vec(g.grad_bias), oracle::numeric_gradient(b, f)), 1e-6);
}

TEST(ReluAdd, ForwardAndBackward) {
  Tensor<double> x({1, 1, 1, 4}, {-1.0, 0.0, 2.0, -3.0});
  EXPECT_EQ(relu(x), Tensor<double>({1, 1, 1, 4}, {0.0, 0.0, 2.0, 0.0}));
  auto g = relu_backward(Tensor<double>({1, 1, 1, 4}, 1.0), x);
  EXPECT_EQ(g, Tensor<double>({1, 1, 1, 4}, {0.0, 0.0, 1.0, 0.0}));
  EXPECT_EQ(add(x, x)[2], 4.0);
  EXPECT_THROW(add(x, Tensor<double>({4})), ShapeError);
}

TEST(Loss, CrossEntropyValueAndGradient) {
  std::mt19937_64 rng(20);
  auto logits = oracle::random_tensor<double>({4, 5}, rng, -3, 3);
  std::vector<int> labels{0, 4, 2, 2};
  auto r = cross_entropy_softmax<double>(logits, labels);
  double want = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    double z = 0;
    for (std::size_t k = 0; k < 5; ++k) z += std::exp(logits[b * 5 + k]);
    want -= std::log(std::exp(logits[b * 5 + labels[b]]) / z);
  }
  EXPECT_NEAR(r.loss, want / 4, 1e-12);
  auto f = [&] { return cross_entropy_softmax<double>(logits, labels).loss; };
  EXPECT_LT(oracle::relative_error(as_vec(r.grad), oracle::numeric_gradient(logits.storage(), f)), 1e-6);
  std::vector<int> bad{0, 5, 1, 1};
  EXPECT_THROW(cross_entropy_softmax<double>(logits, bad), InputError);
  std::vector<int> negative{0, -1, 1, 1};
  EXPECT_THROW(cross_entropy_softmax<double>(logits, negative), InputError);
}

TEST(Loss, SoftmaxIsStableForLargeLogits) {
  Tensor<float> logits({1, 3}, {1000.f, 1000.f, -1000.f});
  auto p = softmax(logits);
  EXPECT_NEAR(p[0], 0.5f, 1e-6);
  EXPECT_NEAR(p[2], 0.f, 1e-6);
}
