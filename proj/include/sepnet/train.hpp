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

// Training: SGD with momentum and step/polynomial schedules, image
// preprocessing (GCN, ZCA, pad-crop-mirror), dataset readers, evaluation and
// the train -> binarize -> fine-tune pipeline.

#pragma once

#include <zlib.h>

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sepnet/compress.hpp"
#include "sepnet/graph.hpp"
#include "sepnet/ops.hpp"

namespace sepnet {

// ---------------------------------------------------------------------------
// Configuration

struct LrSchedule {
  enum class Kind { Step, Polynomial };
  Kind kind = Kind::Step;
  std::vector<std::size_t> milestones{32000, 48000};
  double factor = 0.1;
  double power = 1.0;
};

struct TrainConfig {
  double base_lr = 0.1;
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 256;
  std::size_t max_iter = 64000;
  std::uint64_t seed = 0;
  bool decay_scales_and_bn = false;  // apply weight decay to alpha and BN affine terms
  std::size_t log_every = 100;
  double finetune_lr_factor = 0.01;  // fine-tune lr = factor * base_lr
  std::size_t finetune_iter = 0;     // 0: same as max_iter

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_iter == 0) throw ConfigError("max_iter must be positive");
    if (!(finetune_lr_factor > 0)) throw ConfigError("finetune_lr_factor must be > 0");
    if (schedule.kind == LrSchedule::Kind::Step &&
        !std::is_sorted(schedule.milestones.begin(), schedule.milestones.end())) {
      throw ConfigError("lr milestones must be ascending");
    }
  }
};

/// Learning rate at `iter` (0-based). Step: base * factor^(milestones <= iter).
/// Polynomial: base * (1 - iter / max_iter)^power.
inline double learning_rate(const TrainConfig& c, std::size_t iter) {
  if (c.schedule.kind == LrSchedule::Kind::Step) {
    double lr = c.base_lr;
    for (auto m : c.schedule.milestones)
      if (iter >= m) lr *= c.schedule.factor;
    return lr;
  }
  const double frac = std::min(1.0, static_cast<double>(iter) / static_cast<double>(c.max_iter));
  return c.base_lr * std::pow(1.0 - frac, c.schedule.power);
}

// ---------------------------------------------------------------------------
// SGD

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;       // dense slots
  std::vector<std::vector<T>> alpha_velocity;  // frozen patterns
};

/// v <- mu v - lr (g + lambda w); w <- w + v. Frozen patterns update only
/// their scales, which are kept nonnegative. Q8 slots and running
/// statistics are left alone.
template <typename T>
void sgd_step(Network<T>& net, const Gradients<T>& grads, SgdState<T>& state,
              const TrainConfig& cfg, std::size_t iter) {
  auto& slots = net.slots();
  if (grads.size() != slots.size()) {
    throw ShapeError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(slots.size()) + " slots");
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto check = [&](std::span<const T> g) {
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (!std::isfinite(g[k])) {
          throw NumericError("non-finite gradient in '" + slots[i].name + "' at element " +
                             std::to_string(k) + " (iteration " + std::to_string(iter) + ")");
        }
      }
    };
    check(grads[i].dense.data());
    check(grads[i].alpha);
  }
  state.velocity.resize(slots.size());
  state.alpha_velocity.resize(slots.size());
  const T lr = static_cast<T>(learning_rate(cfg, iter));
  const T mu = static_cast<T>(cfg.momentum);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& s = slots[i];
    if (!s.trainable()) continue;
    const bool bn = s.role == SlotRole::Gamma || s.role == SlotRole::Beta;
    if (s.frozen_pattern) {
      const T lambda = cfg.decay_scales_and_bn ? static_cast<T>(cfg.weight_decay) : T(0);
      auto& alpha = s.pattern->alpha;
      auto& v = state.alpha_velocity[i];
      if (v.size() != alpha.size()) v.assign(alpha.size(), T(0));
      const auto& g = grads[i].alpha;
      if (g.size() != alpha.size()) throw ShapeError("sgd_step: alpha gradient size for " + s.name);
      for (std::size_t k = 0; k < alpha.size(); ++k) {
        v[k] = mu * v[k] - lr * (g[k] + lambda * alpha[k]);
        alpha[k] = std::max(T(0), alpha[k] + v[k]);
      }
      net.refresh_pattern(i);
      continue;
    }
    const auto& g = grads[i].dense;
    if (g.shape() != s.value.shape()) throw ShapeError("sgd_step: gradient shape for " + s.name);
    const T lambda = (bn && !cfg.decay_scales_and_bn) ? T(0) : static_cast<T>(cfg.weight_decay);
    auto& v = state.velocity[i];
    if (v.shape() != s.value.shape()) v = Tensor<T>(s.value.shape());
    for (std::size_t k = 0; k < s.value.numel(); ++k) {
      v[k] = mu * v[k] - lr * (g[k] + lambda * s.value[k]);
      s.value[k] += v[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Datasets

/// Images stored as float N x C x H x W, labels in [0, classes).
struct Dataset {
  Shape image_shape;  // C x H x W
  std::size_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return shape_numel(image_shape); }
  std::span<float> image(std::size_t i) {
    return {images.data() + i * image_size(), image_size()};
  }
  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }

  /// First `n` examples (or all, if fewer).
  Dataset head(std::size_t n) const {
    Dataset d{image_shape, classes, {}, {}};
    n = std::min(n, size());
    d.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n * image_size()));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

namespace detail {

/// Reads a whole file, transparently inflating gzip input.
inline std::vector<std::uint8_t> read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw InputError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw InputError("decompression of '" + path.string() + "' failed");
  return out;
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

inline std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t(b[at]) | (std::uint32_t(b[at + 1]) << 8) |
         (std::uint32_t(b[at + 2]) << 16) | (std::uint32_t(b[at + 3]) << 24);
}

}  // namespace detail

/// MNIST-style IDX files (optionally .gz). Pixels are scaled to [0, 1].
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t classes = 10) {
  const auto ib = detail::read_maybe_gz(images);
  const auto lb = detail::read_maybe_gz(labels);
  if (ib.size() < 16 || detail::be32(ib, 0) != 0x803) {
    throw InputError("'" + images.string() + "' is not an IDX image file");
  }
  if (lb.size() < 8 || detail::be32(lb, 0) != 0x801) {
    throw InputError("'" + labels.string() + "' is not an IDX label file");
  }
  const std::size_t n = detail::be32(ib, 4), h = detail::be32(ib, 8), w = detail::be32(ib, 12);
  if (detail::be32(lb, 4) != n) throw InputError("IDX image and label counts differ");
  if (ib.size() != 16 + n * h * w || lb.size() != 8 + n) throw InputError("truncated IDX file");
  Dataset d{{1, h, w}, classes, std::vector<float>(n * h * w), std::vector<int>(n)};
  for (std::size_t i = 0; i < n * h * w; ++i) d.images[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    if (static_cast<std::size_t>(d.labels[i]) >= classes) throw InputError("IDX label out of range");
  }
  return d;
}

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& files) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  Dataset d{{3, 32, 32}, 10, {}, {}};
  for (const auto& f : files) {
    const auto b = detail::read_maybe_gz(f);
    if (b.size() % (kPixels + 1)) throw InputError("'" + f.string() + "' is not a CIFAR-10 batch");
    for (std::size_t off = 0; off < b.size(); off += kPixels + 1) {
      if (b[off] > 9) throw InputError("CIFAR-10 label out of range in '" + f.string() + "'");
      d.labels.push_back(b[off]);
      for (std::size_t k = 0; k < kPixels; ++k)
        d.images.push_back(static_cast<float>(b[off + 1 + k]) / 255.0f);
    }
  }
  return d;
}

/// Raw labelled set: "RAWL", u32 n, c, h, w, classes (little-endian), then
/// per example a u32 label followed by c*h*w f32 pixels.
inline Dataset load_raw_labels(const std::filesystem::path& path) {
  const auto b = detail::read_maybe_gz(path);
  if (b.size() < 24 || std::memcmp(b.data(), "RAWL", 4) != 0) {
    throw InputError("'" + path.string() + "' is not a RAWL file");
  }
  const std::size_t n = detail::le32(b, 4);
  Dataset d{{detail::le32(b, 8), detail::le32(b, 12), detail::le32(b, 16)}, detail::le32(b, 20),
            {}, {}};
  const std::size_t px = d.image_size();
  if (px == 0 || b.size() != 24 + n * (4 + 4 * px)) throw InputError("truncated RAWL file");
  d.images.resize(n * px);
  d.labels.resize(n);
  std::size_t at = 24;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t label = detail::le32(b, at);
    if (label >= d.classes) throw InputError("RAWL label out of range");
    d.labels[i] = static_cast<int>(label);
    at += 4;
    for (std::size_t k = 0; k < px; ++k, at += 4) {
      d.images[i * px + k] = std::bit_cast<float>(detail::le32(b, at));
    }
  }
  return d;
}

inline void save_raw_labels(const Dataset& d, const std::filesystem::path& path) {
  std::vector<std::uint8_t> b{'R', 'A', 'W', 'L'};
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
  };
  put(static_cast<std::uint32_t>(d.size()));
  for (auto e : d.image_shape) put(static_cast<std::uint32_t>(e));
  put(static_cast<std::uint32_t>(d.classes));
  for (std::size_t i = 0; i < d.size(); ++i) {
    put(static_cast<std::uint32_t>(d.labels[i]));
    for (float v : d.image(i)) put(std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Loads a train/test pair from `source`:
///  - a directory with data_batch_*.bin and test_batch.bin (CIFAR-10),
///  - a directory with {train,t10k,test}-{images,labels}-idx*-ubyte[.gz] (IDX),
///  - a directory with train.rawl and test.rawl.
inline DataSplits load_splits(const std::filesystem::path& source) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(source)) throw InputError("data path '" + source.string() + "' is not a directory");
  auto find = [&](std::initializer_list<const char*> names) -> std::optional<fs::path> {
    for (const char* n : names) {
      for (const char* ext : {"", ".gz"}) {
        auto p = source / (std::string(n) + ext);
        if (fs::exists(p)) return p;
      }
    }
    return std::nullopt;
  };
  if (auto tb = find({"test_batch.bin"})) {
    std::vector<fs::path> train;
    for (int i = 1; i <= 5; ++i) {
      if (auto p = find({("data_batch_" + std::to_string(i) + ".bin").c_str()})) train.push_back(*p);
    }
    if (train.empty()) throw InputError("no CIFAR-10 training batches in '" + source.string() + "'");
    return {load_cifar10(train), load_cifar10({*tb})};
  }
  auto ti = find({"train-images-idx3-ubyte"});
  auto tl = find({"train-labels-idx1-ubyte"});
  auto vi = find({"test-images-idx3-ubyte", "t10k-images-idx3-ubyte"});
  auto vl = find({"test-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"});
  if (ti && tl && vi && vl) return {load_idx(*ti, *tl), load_idx(*vi, *vl)};
  auto rt = find({"train.rawl"});
  auto rv = find({"test.rawl"});
  if (rt && rv) return {load_raw_labels(*rt), load_raw_labels(*rv)};
  throw InputError("no recognized dataset in '" + source.string() + "'");
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Global contrast normalization in place: subtract the mean, then scale to
/// L2 norm `scale`. A (near) constant image becomes all zeros.
inline void gcn(std::span<float> image, double scale = 1.0, double eps = 1e-8) {
  if (image.empty()) return;
  double mean = 0;
  for (float v : image) mean += v;
  mean /= static_cast<double>(image.size());
  double ss = 0;
  for (float v : image) ss += (v - mean) * (v - mean);
  const double norm = std::max(std::sqrt(ss), eps);
  for (auto& v : image) v = static_cast<float>(scale * (v - mean) / norm);
}

/// x -> W (x - mean), W = U diag((lambda + eps)^-1/2) U^T of the fitted
/// covariance (normalized by N).
class ZcaTransform {
 public:
  bool fitted() const { return fitted_; }
  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  const Eigen::MatrixXd& matrix() const { return w_; }
  const Eigen::VectorXd& mean() const { return mean_; }

  void fit(std::span<const float> data, std::size_t n, std::size_t dim, double eps) {
    if (n == 0 || dim == 0 || data.size() != n * dim) throw InputError("zca_fit: bad data size");
    if (eps < 0) throw ConfigError("zca_fit: epsilon must be >= 0");
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
        data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    const Eigen::MatrixXd xd = x.cast<double>();
    mean_ = xd.colwise().mean().transpose();
    const Eigen::MatrixXd centered = xd.rowwise() - mean_.transpose();
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("zca_fit: eigendecomposition failed");
    Eigen::VectorXd inv = es.eigenvalues().array().max(0.0);
    inv = (inv.array() + eps).rsqrt();
    if (!inv.allFinite()) throw NumericError("zca_fit: singular covariance; use epsilon > 0");
    w_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    fitted_ = true;
  }

  void apply(std::span<float> image) const {
    if (!fitted_) throw UsageError("zca_apply called before zca_fit");
    if (image.size() != dim()) throw ShapeError("zca_apply: image size does not match the fit");
    Eigen::Map<Eigen::VectorXf> x(image.data(), static_cast<Eigen::Index>(image.size()));
    const Eigen::VectorXd y = w_ * (x.cast<double>() - mean_);
    x = y.cast<float>();
  }

 private:
  Eigen::MatrixXd w_;
  Eigen::VectorXd mean_;
  bool fitted_ = false;
};

inline ZcaTransform zca_fit(const Dataset& train, double eps = 1e-2) {
  ZcaTransform z;
  z.fit(train.images, train.size(), train.image_size(), eps);
  return z;
}

inline void zca_apply(const ZcaTransform& z, std::span<float> image) { z.apply(image); }

struct AugmentSpec {
  std::size_t pad = 4;
  bool random_crop = true;
  bool mirror = true;
};

/// Preprocessing and augmentation applied to a dataset.
struct DatasetSpec {
  std::filesystem::path source;
  Shape image_shape;
  std::size_t classes = 0;
  bool gcn = false;
  bool zca = false;
  double zca_epsilon = 1e-2;
  AugmentSpec augment{0, false, false};

  void validate() const {
    if (augment.random_crop && augment.pad == 0) {
      // Cropping the unpadded image is the identity; allowed.
    }
    if (zca_epsilon < 0) throw ConfigError("zca epsilon must be >= 0");
  }
};

/// Zero-pads each channel by `pad` on every side.
inline std::vector<float> pad_image(std::span<const float> img, const Shape& chw, std::size_t pad) {
  const std::size_t c = chw[0], h = chw[1], w = chw[2], ph = h + 2 * pad, pw = w + 2 * pad;
  std::vector<float> out(c * ph * pw, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(img.data() + (ch * h + y) * w, w, out.data() + (ch * ph + y + pad) * pw + pad);
  return out;
}

/// h x w window of a padded C x ph x pw image at (dy, dx), optionally mirrored.
inline std::vector<float> crop_image(std::span<const float> padded, const Shape& padded_chw,
                                     std::size_t dy, std::size_t dx, std::size_t h, std::size_t w,
                                     bool flip) {
  const std::size_t c = padded_chw[0], ph = padded_chw[1], pw = padded_chw[2];
  if (dy + h > ph || dx + w > pw) throw ShapeError("crop window outside the padded image");
  std::vector<float> out(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * h + y) * w + (flip ? w - 1 - x : x)] = padded[(ch * ph + dy + y) * pw + dx + x];
  return out;
}

struct CropChoice {
  std::size_t dy = 0, dx = 0;
  bool flip = false;
};

inline CropChoice draw_crop(const AugmentSpec& spec, std::mt19937_64& rng) {
  CropChoice c{spec.pad, spec.pad, false};
  if (spec.random_crop) {
    std::uniform_int_distribution<std::size_t> off(0, 2 * spec.pad);
    c.dy = off(rng);
    c.dx = off(rng);
  }
  if (spec.mirror) c.flip = std::bernoulli_distribution(0.5)(rng);
  return c;
}

/// Pad, crop back to the original size and maybe mirror, driven by `rng`.
inline std::vector<float> augment(std::span<const float> img, const Shape& chw,
                                  const AugmentSpec& spec, std::mt19937_64& rng) {
  const CropChoice c = draw_crop(spec, rng);
  const auto padded = pad_image(img, chw, spec.pad);
  return crop_image(padded, {chw[0], chw[1] + 2 * spec.pad, chw[2] + 2 * spec.pad}, c.dy, c.dx,
                    chw[1], chw[2], c.flip);
}

/// Applies GCN, then ZCA fitted on `splits.train` only.
inline std::optional<ZcaTransform> preprocess(DataSplits& splits, const DatasetSpec& spec) {
  if (spec.gcn) {
    for (std::size_t i = 0; i < splits.train.size(); ++i) gcn(splits.train.image(i));
    for (std::size_t i = 0; i < splits.test.size(); ++i) gcn(splits.test.image(i));
  }
  if (!spec.zca) return std::nullopt;
  auto z = zca_fit(splits.train, spec.zca_epsilon);
  for (std::size_t i = 0; i < splits.train.size(); ++i) z.apply(splits.train.image(i));
  for (std::size_t i = 0; i < splits.test.size(); ++i) z.apply(splits.test.image(i));
  return z;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0;
  double top1 = 0;  // fractions in [0, 1]
  double top5 = 0;
  std::size_t count = 0;
};

/// Rank of the true class; ties go to the lower class index.
template <typename T>
std::size_t label_rank(std::span<const T> logits, int label) {
  const T ref = logits[static_cast<std::size_t>(label)];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > ref || (logits[j] == ref && j < static_cast<std::size_t>(label))) ++rank;
  }
  return rank;
}

/// Sums of top-1 / top-5 hits and loss over a batch of logits.
template <typename T>
EvalResult score_logits(const Tensor<T>& logits, std::span<const int> labels) {
  EvalResult r;
  const std::size_t c = logits.dim(1);
  const auto loss = cross_entropy_softmax(logits, labels);
  r.loss = static_cast<double>(loss.loss) * static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto rank = label_rank<T>(logits.data().subspan(i * c, c), labels[i]);
    r.top1 += rank < 1;
    r.top5 += rank < 5;
  }
  r.count = labels.size();
  return r;
}

inline EvalResult finish(EvalResult r) {
  if (r.count) {
    const double n = static_cast<double>(r.count);
    r.loss /= n;
    r.top1 /= n;
    r.top5 /= n;
  }
  return r;
}

template <typename T>
Tensor<T> make_batch(const Dataset& d, std::span<const std::size_t> idx, std::vector<int>& labels,
                     const AugmentSpec* aug = nullptr, std::mt19937_64* rng = nullptr) {
  Shape s{idx.size()};
  s.insert(s.end(), d.image_shape.begin(), d.image_shape.end());
  Tensor<T> x(s);
  const std::size_t px = d.image_size();
  labels.resize(idx.size());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    labels[b] = d.labels[idx[b]];
    if (aug) {
      const auto img = augment(d.image(idx[b]), d.image_shape, *aug, *rng);
      for (std::size_t k = 0; k < px; ++k) x[b * px + k] = static_cast<T>(img[k]);
    } else {
      const auto img = d.image(idx[b]);
      for (std::size_t k = 0; k < px; ++k) x[b * px + k] = static_cast<T>(img[k]);
    }
  }
  return x;
}

/// Eval-mode accuracy over the whole set (no augmentation).
template <typename T>
EvalResult evaluate(Network<T>& net, const Dataset& d, std::size_t batch = 100) {
  EvalResult total;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    idx.resize(std::min(batch, d.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = make_batch<T>(d, idx, labels);
    auto logits = net.forward(x, Mode::Eval);
    const auto r = score_logits(logits.reshaped({idx.size(), logits.numel() / idx.size()}),
                                std::span<const int>(labels));
    total.loss += r.loss;
    total.top1 += r.top1;
    total.top5 += r.top5;
    total.count += r.count;
  }
  return finish(total);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  std::size_t iter = 0;
  double lr = 0;
  double loss = 0;
  double top1 = 0;
  double top5 = 0;
};

inline std::string format_log_row(const TrainLogRow& r) {
  std::ostringstream os;
  os << r.iter << '\t' << r.lr << '\t' << r.loss << '\t' << r.top1 << '\t' << r.top5;
  return os.str();
}

using LogSink = std::function<void(const TrainLogRow&)>;

/// Mini-batch SGD for `iters` iterations. Examples are drawn by per-epoch
/// shuffles of a generator seeded with cfg.seed. Log rows average loss and
/// training-batch accuracy since the previous row.
template <typename T>
void train(Network<T>& net, const Dataset& data, const AugmentSpec& aug, const TrainConfig& cfg,
           std::size_t iters, const LogSink& sink = {}) {
  cfg.validate();
  if (data.size() == 0) throw InputError("train: empty dataset");
  if (data.image_shape != net.input_shape()) {
    throw ShapeError("train: dataset images " + to_string(data.image_shape) +
                     " but network expects " + to_string(net.input_shape()));
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  SgdState<T> state;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  const bool augmenting = aug.pad > 0 || aug.random_crop || aug.mirror;
  EvalResult window;
  for (std::size_t it = 0; it < iters; ++it) {
    idx.clear();
    while (idx.size() < std::min(cfg.batch_size, data.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const auto x = make_batch<T>(data, idx, labels, augmenting ? &aug : nullptr, &rng);
    auto logits = net.forward(x, Mode::Train);
    const auto flat = logits.reshaped({idx.size(), logits.numel() / idx.size()});
    const auto loss = cross_entropy_softmax(flat, std::span<const int>(labels));
    const auto grads = net.backward(loss.grad.reshaped(logits.shape()));
    sgd_step(net, grads, state, cfg, it);

    const auto r = score_logits(flat, std::span<const int>(labels));
    window.loss += r.loss;
    window.top1 += r.top1;
    window.top5 += r.top5;
    window.count += r.count;
    if (sink && cfg.log_every && ((it + 1) % cfg.log_every == 0 || it + 1 == iters)) {
      const auto f = finish(window);
      sink({it + 1, learning_rate(cfg, it), f.loss, f.top1, f.top5});
      window = {};
    }
  }
}

// ---------------------------------------------------------------------------
// Pipeline

enum class PipelineStep { FullTrain, Binarize, Finetune };

inline const char* pipeline_step_name(PipelineStep s) {
  switch (s) {
    case PipelineStep::FullTrain: return "full-train";
    case PipelineStep::Binarize: return "binarize";
    case PipelineStep::Finetune: return "finetune";
  }
  return "?";
}

struct PipelineOptions {
  Scope scope;
  AlphaGranularity granularity = AlphaGranularity::PerFilter;
};

/// Fine-tune settings derived from the training config.
inline TrainConfig finetune_config(const TrainConfig& cfg) {
  TrainConfig f = cfg;
  f.base_lr = cfg.base_lr * cfg.finetune_lr_factor;
  if (cfg.finetune_iter) {
    f.max_iter = cfg.finetune_iter;
    const double ratio = static_cast<double>(cfg.finetune_iter) / static_cast<double>(cfg.max_iter);
    for (auto& m : f.schedule.milestones)
      m = static_cast<std::size_t>(std::llround(static_cast<double>(m) * ratio));
  }
  return f;
}

/// Runs one step of train -> binarize -> fine-tune, enforcing the order:
/// full-train needs a Full model, binarize a Full model, fine-tune a
/// BiPattern model.
template <typename T>
void run_step(Network<T>& net, PipelineStep step, const Dataset& train_set, const AugmentSpec& aug,
              const TrainConfig& cfg, const PipelineOptions& opt = {}, const LogSink& sink = {}) {
  auto require = [&](Stage s) {
    if (net.stage() != s) {
      throw UsageError(std::string(pipeline_step_name(step)) + " requires a " + stage_name(s) +
                       " model, got " + stage_name(net.stage()));
    }
  };
  switch (step) {
    case PipelineStep::FullTrain:
      require(Stage::Full);
      train(net, train_set, aug, cfg, cfg.max_iter, sink);
      break;
    case PipelineStep::Binarize:
      require(Stage::Full);
      binarize_network(net, opt.scope, opt.granularity);
      break;
    case PipelineStep::Finetune: {
      require(Stage::BiPattern);
      const auto f = finetune_config(cfg);
      train(net, train_set, aug, f, f.max_iter, sink);
      net.set_stage(Stage::Refined);
      break;
    }
  }
}

template <typename T>
struct PipelineResult {
  Network<T> full, bipattern, refined;
  EvalResult full_eval, bipattern_eval, refined_eval;
};

/// Train, binarize, fine-tune; keeps a checkpoint and held-out evaluation of
/// each stage.
template <typename T>
PipelineResult<T> run_pipeline(Network<T> net, const DataSplits& data, const AugmentSpec& aug,
                               const TrainConfig& cfg, const PipelineOptions& opt = {},
                               const LogSink& sink = {}) {
  PipelineResult<T> r;
  run_step(net, PipelineStep::FullTrain, data.train, aug, cfg, opt, sink);
  r.full = net;
  r.full_eval = evaluate(net, data.test);
  run_step(net, PipelineStep::Binarize, data.train, aug, cfg, opt, sink);
  r.bipattern = net;
  r.bipattern_eval = evaluate(net, data.test);
  run_step(net, PipelineStep::Finetune, data.train, aug, cfg, opt, sink);
  r.refined = net;
  r.refined_eval = evaluate(net, data.test);
  return r;
}

}  // namespace sepnet
