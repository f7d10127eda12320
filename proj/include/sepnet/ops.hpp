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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sepnet/gemm.hpp"
#include "sepnet/tensor.hpp"

namespace sepnet {

struct ConvParams {
  std::size_t pad = 0;
  std::size_t stride = 1;
  std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k,
                                   std::size_t pad, std::size_t stride) {
  if (in + 2 * pad < k) {
    throw ShapeError("kernel " + std::to_string(k) +
                     " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t o, kh, kw;      // weight
  std::size_t oh, ow;         // output
  std::size_t groups, cg, og; // per-group channels
  std::size_t pad, stride;

  std::size_t patch() const { return cg * kh * kw; }
  std::size_t plane() const { return oh * ow; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight,
                           const ConvParams& p) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (p.stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (p.groups < 1) throw ConfigError("conv2d: groups must be >= 1");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.groups = p.groups;
  g.pad = p.pad;
  g.stride = p.stride;
  if (g.c % g.groups != 0 || g.o % g.groups != 0) {
    throw ConfigError("conv2d: channels (in " + std::to_string(g.c) +
                      ", out " + std::to_string(g.o) +
                      ") not divisible by groups " + std::to_string(g.groups));
  }
  g.cg = g.c / g.groups;
  g.og = g.o / g.groups;
  if (weight.dim(1) != g.cg) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) +
                     " expects " + std::to_string(weight.dim(1)) +
                     " input channels per group, input " +
                     to_string(input.shape()) + " with " +
                     std::to_string(g.groups) + " groups provides " +
                     std::to_string(g.cg));
  }
  g.oh = conv_out_extent(g.h, g.kh, g.pad, g.stride);
  g.ow = conv_out_extent(g.w, g.kw, g.pad, g.stride);
  return g;
}

// Images per im2col chunk so a column buffer stays around 4M elements.
inline std::size_t conv_chunk(const ConvGeometry& g) {
  const std::size_t per_image = std::max<std::size_t>(1, g.patch() * g.plane());
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per_image, 1, g.n);
}

// col[patch, nb * plane] for group `grp` of images [n0, n0 + nb).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t grp,
            std::size_t n0, std::size_t nb, T* col) {
  const std::size_t cols = nb * g.plane();
  for (std::size_t c = 0; c < g.cg; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* src = x + ((n0 + b) * g.c + grp * g.cg + c) * g.h * g.w;
          T* dst = row + b * g.plane();
          for (std::size_t oi = 0; oi < g.oh; ++oi) {
            const std::ptrdiff_t ii =
                static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                static_cast<std::ptrdiff_t>(g.pad);
            T* drow = dst + oi * g.ow;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(drow, drow + g.ow, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(ii) * g.w;
            for (std::size_t oj = 0; oj < g.ow; ++oj) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                  static_cast<std::ptrdiff_t>(g.pad);
              drow[oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w))
                             ? T(0)
                             : srow[jj];
            }
          }
        }
      }
    }
  }
}

// Accumulating inverse of im2col.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::size_t grp,
            std::size_t n0, std::size_t nb, T* x) {
  const std::size_t cols = nb * g.plane();
  for (std::size_t c = 0; c < g.cg; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          T* dst = x + ((n0 + b) * g.c + grp * g.cg + c) * g.h * g.w;
          const T* src = row + b * g.plane();
          for (std::size_t oi = 0; oi < g.oh; ++oi) {
            const std::ptrdiff_t ii =
                static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                static_cast<std::ptrdiff_t>(g.pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* drow = dst + static_cast<std::size_t>(ii) * g.w;
            const T* srow = src + oi * g.ow;
            for (std::size_t oj = 0; oj < g.ow; ++oj) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(g.w)) {
                drow[jj] += srow[oj];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Grouped 2-D convolution (im2col + GEMM).
///
/// input is N x C x H x W, weight is O x (C/groups) x KH x KW. Output group g
/// reads only input channels [g*C/groups, (g+1)*C/groups). An empty bias span
/// means no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 std::span<const T> bias, const ConvParams& p) {
  const auto g = detail::conv_geometry(input, weight, p);
  if (!bias.empty() && bias.size() != g.o) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) +
                     " != out channels " + std::to_string(g.o));
  }
  Tensor<T> out({g.n, g.o, g.oh, g.ow});
  const std::size_t chunk = detail::conv_chunk(g);
  std::vector<T> col, mat;
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - n0);
    const std::size_t cols = nb * g.plane();
    col.resize(g.patch() * cols);
    mat.resize(g.og * cols);
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      detail::im2col(input.ptr(), g, grp, n0, nb, col.data());
      gemm<T>(false, false, g.og, cols, g.patch(), T(1),
              weight.ptr() + grp * g.og * g.patch(), g.patch(), col.data(),
              cols, T(0), mat.data(), cols);
      for (std::size_t oc = 0; oc < g.og; ++oc) {
        const std::size_t ch = grp * g.og + oc;
        const T b = bias.empty() ? T(0) : bias[ch];
        for (std::size_t bi = 0; bi < nb; ++bi) {
          const T* src = mat.data() + oc * cols + bi * g.plane();
          T* dst = out.ptr() + ((n0 + bi) * g.o + ch) * g.plane();
          for (std::size_t i = 0; i < g.plane(); ++i) dst[i] = src[i] + b;
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;  // length O; always computed
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weight, const ConvParams& p) {
  const auto g = detail::conv_geometry(input, weight, p);
  const Shape expected{g.n, g.o, g.oh, g.ow};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_backward: grad_out " +
                     to_string(grad_out.shape()) + " != forward output " +
                     to_string(expected));
  }
  ConvGrads<T> r{Tensor<T>(input.shape()), Tensor<T>(weight.shape()),
                 Tensor<T>({g.o})};
  const std::size_t chunk = detail::conv_chunk(g);
  std::vector<T> col, dcol, mat;
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - n0);
    const std::size_t cols = nb * g.plane();
    col.resize(g.patch() * cols);
    dcol.resize(g.patch() * cols);
    mat.resize(g.og * cols);
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      for (std::size_t oc = 0; oc < g.og; ++oc) {
        const std::size_t ch = grp * g.og + oc;
        T bsum = 0;
        for (std::size_t bi = 0; bi < nb; ++bi) {
          const T* src = grad_out.ptr() + ((n0 + bi) * g.o + ch) * g.plane();
          T* dst = mat.data() + oc * cols + bi * g.plane();
          for (std::size_t i = 0; i < g.plane(); ++i) {
            dst[i] = src[i];
            bsum += src[i];
          }
        }
        r.grad_bias[ch] += bsum;
      }
      detail::im2col(input.ptr(), g, grp, n0, nb, col.data());
      // dW_g += dY_g * col^T
      gemm<T>(false, true, g.og, g.patch(), cols, T(1), mat.data(), cols,
              col.data(), cols, T(1),
              r.grad_weight.ptr() + grp * g.og * g.patch(), g.patch());
      // dcol = W_g^T * dY_g
      gemm<T>(true, false, g.patch(), cols, g.og, T(1),
              weight.ptr() + grp * g.og * g.patch(), g.patch(), mat.data(),
              cols, T(0), dcol.data(), cols);
      detail::col2im(dcol.data(), g, grp, n0, nb, r.grad_input.ptr());
    }
  }
  return r;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  require_same_shape(grad_out, input, "relu_backward");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) {
    out[i] = input[i] > T(0) ? grad_out[i] : T(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over N, H, W per channel.

template <typename T>
struct BatchNormCache {
  Tensor<T> x_hat;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormParams {
  T eps = T(1e-5);
  T momentum = T(0.1);  // running = (1 - momentum) * running + momentum * batch
};

namespace detail {
template <typename T>
void check_bn(const Tensor<T>& x, std::span<const T> gamma,
              std::span<const T> beta) {
  require_rank(x, 4, "batchnorm2d input");
  if (gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw ShapeError("batchnorm2d: affine length does not match " +
                     std::to_string(x.dim(1)) + " channels");
  }
}
}  // namespace detail

/// Training-mode batch norm: normalizes with batch statistics and folds them
/// into the running estimates (running variance uses the unbiased estimate).
template <typename T>
Tensor<T> batchnorm2d_train(const Tensor<T>& x, std::span<const T> gamma,
                            std::span<const T> beta,
                            std::span<T> running_mean, std::span<T> running_var,
                            const BatchNormParams<T>& bp,
                            BatchNormCache<T>* cache) {
  detail::check_bn(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t m = n * hw;
  Tensor<T> out(x.shape());
  BatchNormCache<T> local;
  BatchNormCache<T>& cc = cache ? *cache : local;
  cc.x_hat = Tensor<T>(x.shape());
  cc.inv_std.assign(c, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.ptr() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) mean += p[i];
    }
    mean /= static_cast<T>(m);
    T var = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.ptr() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    var /= static_cast<T>(m);
    const T inv_std = T(1) / std::sqrt(var + bp.eps);
    cc.inv_std[ch] = inv_std;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x.ptr()[off + i] - mean) * inv_std;
        cc.x_hat.ptr()[off + i] = xh;
        out.ptr()[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
    if (!running_mean.empty()) {
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean[ch] = (T(1) - bp.momentum) * running_mean[ch] + bp.momentum * mean;
      running_var[ch] = (T(1) - bp.momentum) * running_var[ch] + bp.momentum * unbiased;
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, std::span<const T> gamma,
                           std::span<const T> beta,
                           std::span<const T> running_mean,
                           std::span<const T> running_var, T eps = T(1e-5)) {
  detail::check_bn(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T scale = gamma[ch] / std::sqrt(running_var[ch] + eps);
    const T shift = beta[ch] - running_mean[ch] * scale;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        out.ptr()[off + i] = x.ptr()[off + i] * scale + shift;
      }
    }
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> grad_input;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& grad_out,
                                       const BatchNormCache<T>& cache,
                                       std::span<const T> gamma) {
  require_same_shape(grad_out, cache.x_hat, "batchnorm2d_backward");
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1),
                    hw = grad_out.dim(2) * grad_out.dim(3);
  const T m = static_cast<T>(n * hw);
  BatchNormGrads<T> r{Tensor<T>(grad_out.shape()), std::vector<T>(c, T(0)),
                      std::vector<T>(c, T(0))};
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += grad_out.ptr()[off + i];
        sum_dy_xh += grad_out.ptr()[off + i] * cache.x_hat.ptr()[off + i];
      }
    }
    r.grad_beta[ch] = sum_dy;
    r.grad_gamma[ch] = sum_dy_xh;
    const T k = gamma[ch] * cache.inv_std[ch] / m;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        r.grad_input.ptr()[off + i] =
            k * (m * grad_out.ptr()[off + i] - sum_dy -
                 cache.x_hat.ptr()[off + i] * sum_dy_xh);
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pooling.

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  require_rank(x, 4, "avgpool2d input");
  if (k < 1 || stride < 1) throw ConfigError("avgpool2d: kernel and stride must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_out_extent(h, k, 0, stride);
  const std::size_t ow = conv_out_extent(w, k, 0, stride);
  Tensor<T> out({n, c, oh, ow});
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = out.ptr() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T s = 0;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) {
            s += src[(i * stride + a) * w + j * stride + b];
          }
        }
        dst[i * ow + j] = s * inv;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const Shape& in_shape,
                             std::size_t k, std::size_t stride) {
  const std::size_t n = in_shape[0], c = in_shape[1], h = in_shape[2],
                    w = in_shape[3];
  const std::size_t oh = conv_out_extent(h, k, 0, stride);
  const std::size_t ow = conv_out_extent(w, k, 0, stride);
  if (grad_out.shape() != Shape{n, c, oh, ow}) {
    throw ShapeError("avgpool2d_backward: grad_out " +
                     to_string(grad_out.shape()) + " does not match input " +
                     to_string(in_shape));
  }
  Tensor<T> gi(in_shape);
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = grad_out.ptr() + p * oh * ow;
    T* dst = gi.ptr() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const T v = src[i * ow + j] * inv;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) {
            dst[(i * stride + a) * w + j * stride + b] += v;
          }
        }
      }
    }
  }
  return gi;
}

template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avgpool input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x.ptr()[p * hw + i];
    out[p] = s / static_cast<T>(hw);
  }
  return out;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& grad_out,
                                  const Shape& in_shape) {
  if (in_shape.size() != 4 ||
      grad_out.shape() != Shape{in_shape[0], in_shape[1], 1, 1}) {
    throw ShapeError("global_avgpool_backward: grad_out " +
                     to_string(grad_out.shape()) + " does not match input " +
                     to_string(in_shape));
  }
  const std::size_t hw = in_shape[2] * in_shape[3];
  Tensor<T> gi(in_shape);
  for (std::size_t p = 0; p < in_shape[0] * in_shape[1]; ++p) {
    const T v = grad_out[p] / static_cast<T>(hw);
    for (std::size_t i = 0; i < hw; ++i) gi.ptr()[p * hw + i] = v;
  }
  return gi;
}

// Option-A residual shortcut: spatial subsampling by `stride` plus zero
// channel padding split evenly before and after the existing channels.
template <typename T>
Tensor<T> downsample_pad(const Tensor<T>& x, std::size_t stride,
                         std::size_t out_channels) {
  require_rank(x, 4, "downsample_pad input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_channels < c || stride < 1) {
    throw ConfigError("downsample_pad: out channels " +
                      std::to_string(out_channels) + " < in channels " +
                      std::to_string(c));
  }
  const std::size_t front = (out_channels - c) / 2;
  const std::size_t oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
  Tensor<T> out({n, out_channels, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          out.at(b, ch + front, i, j) = x.at(b, ch, i * stride, j * stride);
  return out;
}

template <typename T>
Tensor<T> downsample_pad_backward(const Tensor<T>& grad_out,
                                  const Shape& in_shape, std::size_t stride) {
  const std::size_t n = in_shape[0], c = in_shape[1];
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t front = (grad_out.dim(1) - c) / 2;
  Tensor<T> gi(in_shape);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          gi.at(b, ch, i * stride, j * stride) = grad_out.at(b, ch + front, i, j);
  return gi;
}

// ---------------------------------------------------------------------------
// Fully connected: y = x W^T + b, x flattened to N x features.

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 std::span<const T> bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t n = x.dim(0);
  const std::size_t in = x.numel() / n;
  const std::size_t out = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " has " +
                     std::to_string(in) + " features, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (!bias.empty() && bias.size() != out) {
    throw ShapeError("linear: bias length mismatch");
  }
  Tensor<T> y({n, out});
  gemm<T>(false, true, n, out, in, T(1), x.ptr(), in, weight.ptr(), in, T(0),
          y.ptr(), out);
  if (!bias.empty()) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < out; ++o) y[b * out + o] += bias[o];
  }
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                               const Tensor<T>& weight) {
  const std::size_t n = x.dim(0);
  const std::size_t in = x.numel() / n;
  const std::size_t out = weight.dim(0);
  if (grad_out.shape() != Shape{n, out}) {
    throw ShapeError("linear_backward: grad_out " +
                     to_string(grad_out.shape()) + " expected [" +
                     std::to_string(n) + "x" + std::to_string(out) + "]");
  }
  LinearGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(weight.shape()),
                   Tensor<T>({out})};
  gemm<T>(false, false, n, in, out, T(1), grad_out.ptr(), out, weight.ptr(),
          in, T(0), r.grad_input.ptr(), in);
  gemm<T>(true, false, out, in, n, T(1), grad_out.ptr(), out, x.ptr(), in,
          T(0), r.grad_weight.ptr(), in);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < out; ++o) r.grad_bias[o] += grad_out[b * out + o];
  return r;
}

// ---------------------------------------------------------------------------
// Classification loss.

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.ptr() + b * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t k = 0; k < c; ++k) {
      p[b * c + k] = std::exp(row[k] - mx);
      z += p[b * c + k];
    }
    for (std::size_t k = 0; k < c; ++k) p[b * c + k] /= z;
  }
  return p;
}

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad;
};

/// Mean negative log-likelihood of the true class under softmax(logits),
/// with its gradient with respect to the logits.
template <typename T>
LossResult<T> cross_entropy_softmax(const Tensor<T>& logits,
                                    std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy_softmax logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw InputError("cross_entropy_softmax: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(n));
  }
  LossResult<T> r{T(0), softmax(logits)};
  for (std::size_t b = 0; b < n; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw InputError("cross_entropy_softmax: label " + std::to_string(y) +
                       " out of range [0, " + std::to_string(c) + ")");
    }
    const T* row = logits.ptr() + b * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - mx);
    r.loss += std::log(z) + mx - row[y];
    r.grad[b * c + static_cast<std::size_t>(y)] -= T(1);
  }
  r.loss /= static_cast<T>(n);
  for (auto& g : r.grad.storage()) g /= static_cast<T>(n);
  return r;
}

}  // namespace sepnet
