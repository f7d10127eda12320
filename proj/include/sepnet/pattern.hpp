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

// Weight encodings: sign patterns with per-filter scales, and symmetric 8-bit
// linear quantization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sepnet/tensor.hpp"

namespace sepnet {

enum class Encoding : std::uint8_t { F32 = 0, BIN1 = 1, Q8 = 2 };

inline const char* encoding_name(Encoding e) {
  switch (e) {
    case Encoding::F32: return "F32";
    case Encoding::BIN1: return "BIN1";
    case Encoding::Q8: return "Q8";
  }
  return "?";
}

/// Which weights share one scale. PerFilter: one alpha for each c x k x k
/// output filter. PerKernel: one alpha for each k x k slice of a filter.
enum class AlphaGranularity : std::uint8_t { PerFilter = 0, PerKernel = 1 };

/// Sign bits of a binarized OIHW weight plus its nonnegative scales.
///
/// Filter f owns bytes [f * bytes_per_filter(), (f + 1) * bytes_per_filter())
/// of `signs`; weight j of the filter is bit (j % 8) of byte j / 8, set for +1.
template <typename T>
struct BinaryPattern {
  Shape weight_shape;  // O x C x KH x KW
  AlphaGranularity granularity = AlphaGranularity::PerFilter;
  std::vector<std::uint8_t> signs;
  std::vector<T> alpha;

  std::size_t filters() const { return weight_shape.at(0); }
  std::size_t filter_size() const {
    return weight_shape.at(1) * weight_shape.at(2) * weight_shape.at(3);
  }
  std::size_t kernel_area() const { return weight_shape.at(2) * weight_shape.at(3); }
  std::size_t bytes_per_filter() const { return (filter_size() + 7) / 8; }
  std::size_t weights_per_alpha() const {
    return granularity == AlphaGranularity::PerFilter ? filter_size()
                                                      : kernel_area();
  }
  std::size_t alpha_count() const {
    return granularity == AlphaGranularity::PerFilter
               ? filters()
               : filters() * weight_shape.at(1);
  }

  bool positive(std::size_t f, std::size_t j) const {
    return (signs[f * bytes_per_filter() + j / 8] >> (j % 8)) & 1U;
  }
  T sign(std::size_t f, std::size_t j) const { return positive(f, j) ? T(1) : T(-1); }
  std::size_t alpha_index(std::size_t f, std::size_t j) const {
    return granularity == AlphaGranularity::PerFilter
               ? f
               : f * weight_shape.at(1) + j / kernel_area();
  }

  /// Dense alpha * B with the weight's shape.
  Tensor<T> reconstruct() const {
    Tensor<T> w(weight_shape);
    const std::size_t fs = filter_size();
    for (std::size_t f = 0; f < filters(); ++f)
      for (std::size_t j = 0; j < fs; ++j)
        w[f * fs + j] = alpha[alpha_index(f, j)] * sign(f, j);
    return w;
  }

  bool operator==(const BinaryPattern&) const = default;
};

template <typename T>
struct WeightBinarization {
  BinaryPattern<T> pattern;
  std::vector<T> errors;  // ||W_g - alpha_g B_g||_F^2 per scale group
};

/// Closed-form minimizer of ||W - alpha B||_F^2 for each scale group:
/// B = +1 where W >= 0 (else -1), alpha = mean |W| over the group.
template <typename T>
WeightBinarization<T> binarize_weight(
    const Tensor<T>& weight,
    AlphaGranularity granularity = AlphaGranularity::PerFilter) {
  if (weight.empty()) throw InputError("binarize: empty weight tensor");
  require_rank(weight, 4, "binarize weight");
  WeightBinarization<T> r;
  auto& p = r.pattern;
  p.weight_shape = weight.shape();
  p.granularity = granularity;
  p.signs.assign(p.filters() * p.bytes_per_filter(), 0);
  p.alpha.assign(p.alpha_count(), T(0));
  r.errors.assign(p.alpha_count(), T(0));

  const std::size_t fs = p.filter_size();
  const std::size_t group = p.weights_per_alpha();
  for (std::size_t f = 0; f < p.filters(); ++f) {
    for (std::size_t j = 0; j < fs; ++j) {
      const T w = weight[f * fs + j];
      if (w >= T(0)) p.signs[f * p.bytes_per_filter() + j / 8] |= std::uint8_t(1U << (j % 8));
      p.alpha[p.alpha_index(f, j)] += std::abs(w);
    }
  }
  for (auto& a : p.alpha) a /= static_cast<T>(group);
  for (std::size_t f = 0; f < p.filters(); ++f) {
    for (std::size_t j = 0; j < fs; ++j) {
      const std::size_t ai = p.alpha_index(f, j);
      const T d = weight[f * fs + j] - p.alpha[ai] * p.sign(f, j);
      r.errors[ai] += d * d;
    }
  }
  return r;
}

template <typename T>
struct FilterBinarization {
  BinaryPattern<T> pattern;
  T error;
};

/// Binarizes a single filter of any shape (typically c x k x k) as one group.
template <typename T>
FilterBinarization<T> binarize_filter(const Tensor<T>& filter) {
  if (filter.empty()) throw InputError("binarize_filter: empty filter");
  const Tensor<T> as_weight(Shape{1, filter.numel(), 1, 1}, filter.storage());
  auto wb = binarize_weight(as_weight, AlphaGranularity::PerFilter);
  Shape ws{1};
  if (filter.rank() == 3) {
    ws.insert(ws.end(), filter.shape().begin(), filter.shape().end());
  } else {
    ws = Shape{1, filter.numel(), 1, 1};
  }
  wb.pattern.weight_shape = ws;
  return {std::move(wb.pattern), wb.errors[0]};
}

/// dL/dalpha for W = alpha * B with B fixed: sum of grad * B over each group.
template <typename T>
std::vector<T> alpha_gradient(const Tensor<T>& grad_weight,
                              const BinaryPattern<T>& pattern) {
  if (grad_weight.shape() != pattern.weight_shape) {
    throw ShapeError("alpha_gradient: gradient " +
                     to_string(grad_weight.shape()) + " vs pattern " +
                     to_string(pattern.weight_shape));
  }
  std::vector<T> g(pattern.alpha_count(), T(0));
  const std::size_t fs = pattern.filter_size();
  for (std::size_t f = 0; f < pattern.filters(); ++f)
    for (std::size_t j = 0; j < fs; ++j)
      g[pattern.alpha_index(f, j)] += grad_weight[f * fs + j] * pattern.sign(f, j);
  return g;
}

// ---------------------------------------------------------------------------

/// Symmetric 8-bit codes; value = code * scale. Scales are per tensor, or per
/// slice along dimension 0 when per_channel is set.
template <typename T>
struct Quant8Block {
  Shape shape;
  bool per_channel = false;
  std::vector<std::int8_t> codes;
  std::vector<T> scales;

  std::size_t slice() const {
    return per_channel ? shape_numel(shape) / shape.at(0) : shape_numel(shape);
  }
  T scale_for(std::size_t i) const { return scales[per_channel ? i / slice() : 0]; }

  Tensor<T> dequantize() const {
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < codes.size(); ++i)
      t[i] = static_cast<T>(codes[i]) * scale_for(i);
    return t;
  }

  bool operator==(const Quant8Block&) const = default;
};

/// scale = max|w| / 127; an all-zero group gets scale 1 and zero codes.
template <typename T>
Quant8Block<T> quantize8_tensor(const Tensor<T>& t, bool per_channel = false) {
  if (t.empty()) throw InputError("quantize8: empty tensor");
  Quant8Block<T> q;
  q.shape = t.shape();
  q.per_channel = per_channel && t.rank() >= 2;
  const std::size_t groups = q.per_channel ? t.dim(0) : 1;
  const std::size_t len = t.numel() / groups;
  q.codes.resize(t.numel());
  q.scales.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    T mx = 0;
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, std::abs(t[g * len + i]));
    const T scale = mx > T(0) ? mx / T(127) : T(1);
    q.scales[g] = scale;
    for (std::size_t i = 0; i < len; ++i) {
      const T v = std::round(t[g * len + i] / scale);
      q.codes[g * len + i] = static_cast<std::int8_t>(std::clamp(v, T(-127), T(127)));
    }
  }
  return q;
}

}  // namespace sepnet
