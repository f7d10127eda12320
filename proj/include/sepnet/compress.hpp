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

// Network-level compression: binarize convolutions selected by a scope,
// report binarization error, and quantize the remaining reals to 8 bits.

#pragma once

#include <cctype>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sepnet/graph.hpp"
#include "sepnet/pattern.hpp"

namespace sepnet {

/// Which convolutions a compression pass touches.
///
/// Grammar (whitespace ignored): `k>N`, `k>=N`, `k==N`, or `prb`, the
/// latter meaning the k x k branches of pattern residual blocks.
struct Scope {
  enum class Kind { Greater, GreaterEqual, Equal, PatternBranches };
  Kind kind = Kind::Greater;
  std::size_t k = 1;
  std::string text = "k>1";

  bool matches(const LayerNode& n) const {
    if (n.kind != NodeKind::Conv) return false;
    switch (kind) {
      case Kind::Greater: return n.conv.kernel > k;
      case Kind::GreaterEqual: return n.conv.kernel >= k;
      case Kind::Equal: return n.conv.kernel == k;
      case Kind::PatternBranches: return n.role == kPatternRole;
    }
    return false;
  }
};

inline Scope parse_scope(std::string_view text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  Scope scope;
  scope.text = s;
  if (s == "prb") {
    scope.kind = Scope::Kind::PatternBranches;
    return scope;
  }
  auto bad = [&] {
    return InputError("invalid scope '" + std::string(text) +
                      "' (expected k>N, k>=N, k==N or prb)");
  };
  if (s.size() < 3 || s[0] != 'k') throw bad();
  std::size_t pos;
  if (s.compare(1, 2, ">=") == 0) {
    scope.kind = Scope::Kind::GreaterEqual;
    pos = 3;
  } else if (s.compare(1, 2, "==") == 0) {
    scope.kind = Scope::Kind::Equal;
    pos = 3;
  } else if (s[1] == '>') {
    scope.kind = Scope::Kind::Greater;
    pos = 2;
  } else {
    throw bad();
  }
  if (pos >= s.size()) throw bad();
  std::size_t k = 0;
  for (std::size_t i = pos; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i])) || k > 1000) throw bad();
    k = k * 10 + static_cast<std::size_t>(s[i] - '0');
  }
  scope.k = k;
  return scope;
}

/// Binarization error of one convolution.
struct LayerError {
  std::string layer;
  std::size_t kernel = 0;
  std::size_t groups = 0;   // scale groups (filters, or kernels per filter)
  double total = 0;         // sum of squared errors over all groups
  double mean() const { return groups ? total / static_cast<double>(groups) : 0.0; }
};

struct KernelErrorSummary {
  std::size_t kernel = 0;
  std::size_t layers = 0;
  std::size_t groups = 0;
  double total = 0;
  double mean() const { return groups ? total / static_cast<double>(groups) : 0.0; }
};

struct ErrorReport {
  std::vector<LayerError> layers;

  /// Group-weighted mean error per kernel size, ascending k.
  std::vector<KernelErrorSummary> by_kernel() const {
    std::map<std::size_t, KernelErrorSummary> m;
    for (const auto& l : layers) {
      auto& s = m[l.kernel];
      s.kernel = l.kernel;
      ++s.layers;
      s.groups += l.groups;
      s.total += l.total;
    }
    std::vector<KernelErrorSummary> out;
    for (auto& [k, s] : m) out.push_back(s);
    return out;
  }

  std::string to_tsv() const {
    std::ostringstream os;
    os << "layer\tkernel\tgroups\tmean_error\n";
    for (const auto& l : layers) {
      os << l.layer << '\t' << l.kernel << '\t' << l.groups << '\t' << l.mean() << '\n';
    }
    for (const auto& s : by_kernel()) {
      os << "all_k" << s.kernel << '\t' << s.kernel << '\t' << s.groups << '\t' << s.mean()
         << '\n';
    }
    return os.str();
  }
};

namespace detail {

template <typename T>
LayerError layer_error(const LayerNode& n, const WeightBinarization<T>& wb) {
  LayerError e{n.id, n.conv.kernel, wb.errors.size(), 0.0};
  for (T v : wb.errors) e.total += static_cast<double>(v);
  return e;
}

}  // namespace detail

/// Binarization error of every dense convolution, without changing the network.
template <typename T>
ErrorReport quantization_error_report(const Network<T>& net,
                                      AlphaGranularity g = AlphaGranularity::PerFilter) {
  ErrorReport r;
  const auto& nodes = net.descriptor().nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].kind != NodeKind::Conv) continue;
    const auto& s = net.slots()[net.node_slots(i)[0]];
    if (s.encoding != Encoding::F32) continue;
    r.layers.push_back(detail::layer_error(nodes[i], binarize_weight(s.value, g)));
  }
  return r;
}

/// Replaces every dense convolution weight selected by `scope` with a frozen
/// sign pattern. The network moves to BiPattern only if something changed.
template <typename T>
ErrorReport binarize_network(Network<T>& net, const Scope& scope = {},
                             AlphaGranularity g = AlphaGranularity::PerFilter) {
  if (net.stage() == Stage::Quantized) {
    throw UsageError("binarize: network is already quantized");
  }
  ErrorReport r;
  const auto& nodes = net.descriptor().nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!scope.matches(nodes[i])) continue;
    const std::size_t si = net.node_slots(i)[0];
    if (net.slots()[si].encoding != Encoding::F32) continue;
    auto wb = binarize_weight(net.slots()[si].value, g);
    r.layers.push_back(detail::layer_error(nodes[i], wb));
    net.set_pattern(si, std::move(wb.pattern));
  }
  if (!r.layers.empty()) net.set_stage(Stage::BiPattern);
  return r;
}

/// Quantizes every dense parameter (weights, biases, batch-norm affine terms)
/// to symmetric 8-bit codes. Sign patterns and running statistics are kept.
/// Returns the number of slots converted.
template <typename T>
std::size_t quantize8(Network<T>& net, bool per_channel = false) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < net.slots().size(); ++i) {
    const auto& s = net.slots()[i];
    if (!s.is_parameter() || s.encoding != Encoding::F32) continue;
    net.set_quant(i, quantize8_tensor(s.value, per_channel));
    ++n;
  }
  net.set_stage(Stage::Quantized);
  return n;
}

}  // namespace sepnet
