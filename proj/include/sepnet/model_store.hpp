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

// Model files.
//
// Layout, all integers little-endian:
//
//   "SEPN"  u16 version  u32 text_len  text[text_len]      descriptor
//   u32 record_count
//   record*:
//     u16 name_len  name  u8 tag  u8 flags  u8 rank  u32 dims[rank]
//     payload:
//       F32   f32[numel]
//       BIN1  per filter ceil(C*KH*KW / 8) sign bytes (LSB first, 1 = +1),
//             then f32 alpha[filters] (flags bit 0 clear) or
//             f32 alpha[filters * C] (flags bit 0 set, one per kernel)
//       Q8    i8[numel], then f32 scale (flags bit 0 clear) or
//             f32 scales[dims[0]] (flags bit 0 set)
//
// The descriptor is line-oriented `key=value` text; see write_descriptor().

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sepnet/compress.hpp"
#include "sepnet/graph.hpp"

namespace sepnet {

inline constexpr char kMagic[4] = {'S', 'E', 'P', 'N'};
inline constexpr std::uint16_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Descriptor text

inline std::string write_descriptor(const NetworkDescriptor& d, Stage stage) {
  std::ostringstream os;
  auto dims = [](const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
  };
  os << "name=" << d.name << '\n'
     << "input=" << dims(d.input_shape) << '\n'
     << "classes=" << d.class_count << '\n'
     << "stage=" << stage_name(stage) << '\n';
  for (const auto& n : d.nodes) {
    os << "node id=" << n.id << " kind=" << node_kind_name(n.kind) << " in=";
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? "," : "") << n.inputs[i];
    switch (n.kind) {
      case NodeKind::Conv: {
        const auto& c = n.conv;
        os << " cin=" << c.in_ch << " cout=" << c.out_ch << " k=" << c.kernel << " pad=" << c.pad
           << " stride=" << c.stride << " groups=" << c.groups << " bias=" << int(c.bias);
        break;
      }
      case NodeKind::BatchNorm:
        os << " ch=" << n.bn_channels;
        break;
      case NodeKind::AvgPool:
        os << " k=" << n.pool.kernel << " stride=" << n.pool.stride;
        break;
      case NodeKind::DownsamplePad:
        os << " stride=" << n.downsample.stride << " cout=" << n.downsample.out_channels;
        break;
      case NodeKind::Linear:
        os << " fin=" << n.linear.in_features << " fout=" << n.linear.out_features
           << " bias=" << int(n.linear.bias);
        break;
      default:
        break;
    }
    if (!n.role.empty()) os << " role=" << n.role;
    os << '\n';
  }
  return os.str();
}

struct ParsedDescriptor {
  NetworkDescriptor desc;
  Stage stage = Stage::Full;
};

/// Parses descriptor text. `base` is added to reported offsets so errors can
/// point into an enclosing file.
inline ParsedDescriptor parse_descriptor(std::string_view text, std::size_t base = 0) {
  ParsedDescriptor out;
  auto& d = out.desc;
  std::size_t line_start = 0;
  bool have_input = false;
  while (line_start < text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    const std::string_view line = text.substr(line_start, line_end - line_start);
    const std::size_t off = base + line_start;
    auto fail = [&](const std::string& msg) {
      return ParseError("descriptor: " + msg + " in line '" + std::string(line) + "'", off);
    };
    auto number = [&](std::string_view v) -> std::size_t {
      if (v.empty() || v.size() > 12) throw fail("bad number '" + std::string(v) + "'");
      std::size_t x = 0;
      for (char c : v) {
        if (c < '0' || c > '9') throw fail("bad number '" + std::string(v) + "'");
        x = x * 10 + static_cast<std::size_t>(c - '0');
      }
      return x;
    };
    auto flag = [&](std::string_view v) {
      if (v != "0" && v != "1") throw fail("bad flag '" + std::string(v) + "'");
      return v == "1";
    };

    // Tokenize into key=value pairs.
    std::vector<std::pair<std::string_view, std::string_view>> kv;
    bool is_node = false;
    std::size_t p = 0;
    while (p < line.size()) {
      while (p < line.size() && line[p] == ' ') ++p;
      if (p >= line.size()) break;
      std::size_t q = line.find(' ', p);
      if (q == std::string_view::npos) q = line.size();
      const std::string_view tok = line.substr(p, q - p);
      if (kv.empty() && !is_node && tok == "node") {
        is_node = true;
      } else {
        const std::size_t eq = tok.find('=');
        if (eq == std::string_view::npos || eq == 0) throw fail("expected key=value");
        kv.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
      }
      p = q;
    }

    if (!is_node) {
      if (kv.size() != 1) throw fail("expected a single key=value");
      const auto [k, v] = kv[0];
      if (k == "name") {
        d.name = std::string(v);
      } else if (k == "input") {
        std::size_t s = 0;
        while (s <= v.size()) {
          std::size_t e = v.find('x', s);
          if (e == std::string_view::npos) e = v.size();
          d.input_shape.push_back(number(v.substr(s, e - s)));
          s = e + 1;
        }
        have_input = true;
      } else if (k == "classes") {
        d.class_count = number(v);
      } else if (k == "stage") {
        const auto st = parse_stage(std::string(v));
        if (!st) throw fail("unknown stage");
        out.stage = *st;
      } else {
        throw fail("unknown key '" + std::string(k) + "'");
      }
    } else {
      LayerNode n;
      bool have_kind = false;
      for (const auto& [k, v] : kv) {
        if (k == "id") {
          n.id = std::string(v);
        } else if (k == "kind") {
          const auto kind = parse_node_kind(std::string(v));
          if (!kind) throw fail("unknown node kind '" + std::string(v) + "'");
          n.kind = *kind;
          have_kind = true;
        } else if (k == "in") {
          std::size_t s = 0;
          while (s <= v.size()) {
            std::size_t e = v.find(',', s);
            if (e == std::string_view::npos) e = v.size();
            n.inputs.emplace_back(v.substr(s, e - s));
            s = e + 1;
          }
        } else if (k == "cin") {
          n.conv.in_ch = number(v);
        } else if (k == "cout") {
          n.conv.out_ch = n.downsample.out_channels = number(v);
        } else if (k == "k") {
          n.conv.kernel = n.pool.kernel = number(v);
        } else if (k == "pad") {
          n.conv.pad = number(v);
        } else if (k == "stride") {
          n.conv.stride = n.pool.stride = n.downsample.stride = number(v);
        } else if (k == "groups") {
          n.conv.groups = number(v);
        } else if (k == "bias") {
          n.conv.bias = n.linear.bias = flag(v);
        } else if (k == "ch") {
          n.bn_channels = number(v);
        } else if (k == "fin") {
          n.linear.in_features = number(v);
        } else if (k == "fout") {
          n.linear.out_features = number(v);
        } else if (k == "role") {
          n.role = std::string(v);
        } else {
          throw fail("unknown node key '" + std::string(k) + "'");
        }
      }
      if (n.id.empty() || !have_kind) throw fail("node needs id and kind");
      // Reset fields that do not belong to the parsed kind so that the
      // result compares equal to a freshly built descriptor.
      if (n.kind != NodeKind::Conv) n.conv = ConvSpec{};
      if (n.kind != NodeKind::Linear) n.linear = LinearSpec{};
      if (n.kind != NodeKind::AvgPool) n.pool = PoolSpec{};
      if (n.kind != NodeKind::DownsamplePad) n.downsample = DownsampleSpec{};
      d.nodes.push_back(std::move(n));
    }
    line_start = line_end + 1;
  }
  if (!have_input) throw ParseError("descriptor: missing input shape", base);
  try {
    validate(d);
  } catch (const Error& e) {
    throw ParseError(std::string("descriptor: ") + e.what(), base);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary records

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { for (int i = 0; i < 2; ++i) u8(std::uint8_t(v >> (8 * i))); }
  void u32(std::uint32_t v) { for (int i = 0; i < 4; ++i) u8(std::uint8_t(v >> (8 * i))); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw ParseError(std::string("truncated file while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = std::uint16_t(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_record(ByteWriter& w, const ParamSlot<T>& s) {
  if (s.name.size() > 0xFFFF) throw InputError("slot name too long: " + s.name);
  w.u16(static_cast<std::uint16_t>(s.name.size()));
  w.bytes(s.name.data(), s.name.size());
  w.u8(static_cast<std::uint8_t>(s.encoding));
  std::uint8_t flags = 0;
  if (s.encoding == Encoding::BIN1 && s.pattern->granularity == AlphaGranularity::PerKernel) flags = 1;
  if (s.encoding == Encoding::Q8 && s.quant->per_channel) flags = 1;
  w.u8(flags);
  const Shape& shape = s.value.shape();
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
  switch (s.encoding) {
    case Encoding::F32:
      for (T v : s.value.data()) w.f32(static_cast<float>(v));
      break;
    case Encoding::BIN1:
      w.bytes(s.pattern->signs.data(), s.pattern->signs.size());
      for (T a : s.pattern->alpha) w.f32(static_cast<float>(a));
      break;
    case Encoding::Q8:
      w.bytes(s.quant->codes.data(), s.quant->codes.size());
      for (T a : s.quant->scales) w.f32(static_cast<float>(a));
      break;
  }
}

/// Bytes write_record() emits for `s`, computed without writing.
template <typename T>
std::size_t record_size(const ParamSlot<T>& s) {
  std::size_t n = 2 + s.name.size() + 3 + 4 * s.value.rank();
  switch (s.encoding) {
    case Encoding::F32: return n + 4 * s.value.numel();
    case Encoding::BIN1: return n + s.pattern->signs.size() + 4 * s.pattern->alpha.size();
    case Encoding::Q8: return n + s.quant->codes.size() + 4 * s.quant->scales.size();
  }
  return n;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize(const Network<T>& net) {
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kFormatVersion);
  const std::string text = write_descriptor(net.descriptor(), net.stage());
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.u32(static_cast<std::uint32_t>(net.slots().size()));
  for (const auto& s : net.slots()) detail::write_record(w, s);
  return w.buffer();
}

template <typename T>
std::size_t serialized_header_size(const Network<T>& net) {
  return 4 + 2 + 4 + write_descriptor(net.descriptor(), net.stage()).size() + 4;
}

template <typename T>
std::size_t serialized_size(const Network<T>& net) {
  std::size_t n = serialized_header_size(net);
  for (const auto& s : net.slots()) n += detail::record_size(s);
  return n;
}

template <typename T>
Network<T> deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ParseError("bad magic", 0);
  const std::size_t vpos = r.offset();
  if (const auto v = r.u16("version"); v != kFormatVersion) {
    throw ParseError("unsupported format version " + std::to_string(v), vpos);
  }
  const std::uint32_t text_len = r.u32("descriptor length");
  const std::size_t text_pos = r.offset();
  const auto text_bytes = r.take(text_len, "descriptor");
  const std::string_view text(reinterpret_cast<const char*>(text_bytes.data()), text_bytes.size());
  auto parsed = parse_descriptor(text, text_pos);
  Network<T> net(std::move(parsed.desc));
  net.set_stage(parsed.stage);

  const std::size_t count_pos = r.offset();
  const std::uint32_t count = r.u32("record count");
  if (count != net.slots().size()) {
    throw ParseError("record count " + std::to_string(count) + " does not match the " +
                         std::to_string(net.slots().size()) + " slots of the descriptor",
                     count_pos);
  }
  std::vector<bool> seen(net.slots().size(), false);
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    const std::size_t rec_pos = r.offset();
    const std::uint16_t name_len = r.u16("record name length");
    const auto name_bytes = r.take(name_len, "record name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    std::size_t si;
    try {
      si = net.slot_index(name);
    } catch (const InputError&) {
      throw ParseError("unknown record '" + name + "'", rec_pos);
    }
    if (seen[si]) throw ParseError("duplicate record '" + name + "'", rec_pos);
    seen[si] = true;
    const std::size_t tag_pos = r.offset();
    const std::uint8_t tag = r.u8("tag");
    const std::uint8_t flags = r.u8("flags");
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(r.u32("dims"));
    auto& slot = net.slots()[si];
    if (shape != slot.value.shape()) {
      throw ParseError("record '" + name + "' has shape " + to_string(shape) + ", expected " +
                           to_string(slot.value.shape()),
                       tag_pos);
    }
    if (flags > 1) throw ParseError("record '" + name + "': unknown flags", tag_pos);
    const std::size_t numel = shape_numel(shape);
    switch (tag) {
      case static_cast<std::uint8_t>(Encoding::F32): {
        if (!slot.is_parameter() && flags) throw ParseError("bad flags", tag_pos);
        Tensor<T> t(shape);
        for (std::size_t i = 0; i < numel; ++i) t[i] = static_cast<T>(r.f32("f32 payload"));
        slot.value = std::move(t);
        break;
      }
      case static_cast<std::uint8_t>(Encoding::BIN1): {
        if (rank != 4 || slot.role != SlotRole::Weight) {
          throw ParseError("record '" + name + "': BIN1 needs a 4-d weight", tag_pos);
        }
        BinaryPattern<T> p;
        p.weight_shape = shape;
        p.granularity = flags ? AlphaGranularity::PerKernel : AlphaGranularity::PerFilter;
        const auto sb = r.take(p.filters() * p.bytes_per_filter(), "sign bits");
        p.signs.assign(sb.begin(), sb.end());
        p.alpha.resize(p.alpha_count());
        for (auto& a : p.alpha) a = static_cast<T>(r.f32("alpha"));
        net.set_pattern(si, std::move(p));
        break;
      }
      case static_cast<std::uint8_t>(Encoding::Q8): {
        Quant8Block<T> q;
        q.shape = shape;
        q.per_channel = flags != 0;
        if (q.per_channel && rank < 2) {
          throw ParseError("record '" + name + "': per-channel Q8 needs rank >= 2", tag_pos);
        }
        const auto cb = r.take(numel, "q8 codes");
        q.codes.resize(numel);
        std::memcpy(q.codes.data(), cb.data(), numel);
        q.scales.resize(q.per_channel ? shape[0] : 1);
        for (auto& s : q.scales) s = static_cast<T>(r.f32("q8 scales"));
        net.set_quant(si, std::move(q));
        break;
      }
      default:
        throw ParseError("record '" + name + "': unknown tag " + std::to_string(tag), tag_pos);
    }
  }
  if (!r.done()) throw ParseError("trailing bytes after the last record", r.offset());
  return net;
}

/// Writes atomically (temp file + rename). Returns the file size in bytes.
template <typename T>
std::size_t save(const Network<T>& net, const std::filesystem::path& path) {
  const auto bytes = serialize(net);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw InputError("cannot rename to '" + path.string() + "': " + ec.message());
  }
  return bytes.size();
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename T>
Network<T> load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize<T>(bytes);
}

// ---------------------------------------------------------------------------
// Size report: bytes per layer for the raw model (R), after binarizing the
// scope (B), and after additionally quantizing the rest to 8 bits (BQ).

struct SizeRow {
  std::string layer;
  std::size_t r = 0, b = 0, bq = 0;
};

struct SizeReport {
  std::vector<SizeRow> rows;   // first row is the file header
  SizeRow total;

  std::string to_tsv() const {
    std::ostringstream os;
    os << "layer\tR_bytes\tB_bytes\tBQ_bytes\n";
    for (const auto& r : rows) os << r.layer << '\t' << r.r << '\t' << r.b << '\t' << r.bq << '\n';
    os << "total\t" << total.r << '\t' << total.b << '\t' << total.bq << '\n';
    return os.str();
  }
};

/// Sizes of the three encodings of `desc`. Totals equal the bytes save()
/// writes for the corresponding networks. Values do not affect sizes, so the
/// network is built with zero weights.
inline SizeReport size_report(const NetworkDescriptor& desc, const Scope& scope,
                              AlphaGranularity g = AlphaGranularity::PerFilter,
                              bool per_channel = false) {
  Network<float> r(desc);
  Network<float> b = r;
  binarize_network(b, scope, g);
  Network<float> bq = b;
  quantize8(bq, per_channel);

  SizeReport rep;
  rep.rows.push_back({"header", serialized_header_size(r), serialized_header_size(b),
                      serialized_header_size(bq)});
  for (std::size_t i = 0; i < desc.nodes.size(); ++i) {
    const auto& ns = r.node_slots(i);
    if (ns.empty()) continue;
    SizeRow row{desc.nodes[i].id};
    for (auto si : ns) {
      row.r += detail::record_size(r.slots()[si]);
      row.b += detail::record_size(b.slots()[si]);
      row.bq += detail::record_size(bq.slots()[si]);
    }
    rep.rows.push_back(row);
  }
  rep.total.layer = "total";
  for (const auto& row : rep.rows) {
    rep.total.r += row.r;
    rep.total.b += row.b;
    rep.total.bq += row.bq;
  }
  return rep;
}

}  // namespace sepnet
