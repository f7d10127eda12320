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

// Independent reference implementations used by the tests. Everything here
// is written from first principles with plain loops in double precision and
// shares no code with the library beyond the Tensor container.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "sepnet/tensor.hpp"

namespace oracle {

using sepnet::Shape;
using sepnet::Tensor;

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.storage()) v = static_cast<T>(d(rng));
  return t;
}

/// Direct grouped convolution: out[n,o,y,x] = b[o] + sum over the group's
/// input channels and the kernel window.
template <typename T>
Tensor<T> conv(const Tensor<T>& in, const Tensor<T>& w, const std::vector<T>& bias,
               std::size_t pad, std::size_t stride, std::size_t groups) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = w.dim(0), Cg = w.dim(1), K = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  const std::size_t Og = O / groups;
  (void)C;
  Tensor<T> out({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const std::size_t g = o / Og;
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t x = 0; x < OW; ++x) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
          for (std::size_t c = 0; c < Cg; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long iy = long(y * stride + ky) - long(pad);
                const long ix = long(x * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                acc += double(in.at(n, g * Cg + c, std::size_t(iy), std::size_t(ix))) *
                       double(w.at(o, c, ky, kx));
              }
          out.at(n, o, y, x) = static_cast<T>(acc);
        }
    }
  return out;
}

/// Expands a grouped O x C/G x K x K weight into the dense O x C x K x K
/// block-diagonal weight computing the same convolution.
template <typename T>
Tensor<T> block_diagonal(const Tensor<T>& w, std::size_t groups) {
  const std::size_t O = w.dim(0), Cg = w.dim(1), K = w.dim(2), KW = w.dim(3);
  const std::size_t Og = O / groups;
  Tensor<T> d({O, Cg * groups, K, KW});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < Cg; ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < KW; ++kx)
          d.at(o, (o / Og) * Cg + c, ky, kx) = w.at(o, c, ky, kx);
  return d;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.storage()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b[i];
  return y;
}

/// Per-channel mean and biased variance over N, H, W.
template <typename T>
void channel_stats(const Tensor<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  const double m = double(N * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) mean[c] += double(x.at(n, c, y, xx));
    mean[c] /= m;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double d = double(x.at(n, c, y, xx)) - mean[c];
          var[c] += d * d;
        }
    var[c] /= m;
  }
}

/// Batch norm with given statistics: gamma (x - mean) / sqrt(var + eps) + beta.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const std::vector<double>& mean,
                    const std::vector<double>& var, const std::vector<T>& gamma,
                    const std::vector<T>& beta, double eps) {
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < x.dim(2); ++i)
        for (std::size_t j = 0; j < x.dim(3); ++j)
          y.at(n, c, i, j) = static_cast<T>(double(gamma[c]) * (double(x.at(n, c, i, j)) - mean[c]) /
                                                std::sqrt(var[c] + eps) +
                                            double(beta[c]));
  return y;
}

/// Central finite differences of scalar f with respect to each entry of x.
template <typename T>
std::vector<double> numeric_gradient(std::vector<T>& x, const std::function<double()>& f,
                                     double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = static_cast<T>(double(saved) + h);
    const double up = f();
    x[i] = static_cast<T>(double(saved) - h);
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b||_2 / max(||a||_2, ||b||_2, floor): norm-wise relative error. The
/// floor keeps gradients that are exactly zero (a bias feeding batch norm)
/// from turning finite-difference noise into a relative error of 1.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-3) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Best sign pattern by enumeration: for each B in {-1,+1}^n the optimal
/// scale is <W,B>/n; returns the smallest ||W - alpha B||^2 over all B.
inline double exhaustive_binarization_error(const std::vector<double>& w) {
  const std::size_t n = w.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    double dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += ((mask >> i) & 1U) ? w[i] : -w[i];
    const double alpha = dot / double(n);
    double e = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = w[i] - alpha * (((mask >> i) & 1U) ? 1.0 : -1.0);
      e += d * d;
    }
    best = std::min(best, e);
  }
  return best;
}

/// Covariance (normalized by N) of row-major N x D data.
inline std::vector<double> covariance(const std::vector<double>& x, std::size_t n, std::size_t d) {
  std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j] / double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]) / double(n);
  return cov;
}

}  // namespace oracle
