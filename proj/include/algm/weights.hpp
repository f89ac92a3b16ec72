#pragma once

// Weight bundle and the TMW1 file format:
//   "TMW1" | u32 version=1 | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank],
//   prod(dims) float32 values. All integers and floats little-endian.
//
// Tensor schema, in file order (layers are numbered from 1):
//   patch.w [3p^2, d]   patch.b [d]   pos [N, d]
//   layer{i}.ln1.g [d]  layer{i}.ln1.b [d]
//   layer{i}.attn.qkv.w [d, 3d]  layer{i}.attn.qkv.b [3d]
//   layer{i}.attn.proj.w [d, d]  layer{i}.attn.proj.b [d]
//   layer{i}.ln2.g [d]  layer{i}.ln2.b [d]
//   layer{i}.mlp.fc1.w [d, h]  layer{i}.mlp.fc1.b [h]
//   layer{i}.mlp.fc2.w [h, d]  layer{i}.mlp.fc2.b [d]
//   head.w [d, C]  head.b [C]

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/numkernel.hpp"

namespace algm {

inline constexpr std::uint32_t kWeightFileVersion = 1;
inline constexpr char kWeightMagic[4] = {'T', 'M', 'W', '1'};

struct TensorSpec {
  std::string name;
  std::vector<std::uint32_t> dims;
};

inline std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? ", " : "") + std::to_string(dims[i]);
  return s + "]";
}

inline std::string layer_tensor(std::size_t layer, const char* suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

inline std::vector<TensorSpec> weight_schema(const EncoderConfig& cfg) {
  const auto d = static_cast<std::uint32_t>(cfg.dim);
  const auto h = static_cast<std::uint32_t>(cfg.mlp_hidden());
  std::vector<TensorSpec> s{{"patch.w", {static_cast<std::uint32_t>(cfg.patch_dim()), d}},
                            {"patch.b", {d}},
                            {"pos", {static_cast<std::uint32_t>(cfg.num_tokens()), d}}};
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    s.push_back({layer_tensor(l, "ln1.g"), {d}});
    s.push_back({layer_tensor(l, "ln1.b"), {d}});
    s.push_back({layer_tensor(l, "attn.qkv.w"), {d, 3 * d}});
    s.push_back({layer_tensor(l, "attn.qkv.b"), {3 * d}});
    s.push_back({layer_tensor(l, "attn.proj.w"), {d, d}});
    s.push_back({layer_tensor(l, "attn.proj.b"), {d}});
    s.push_back({layer_tensor(l, "ln2.g"), {d}});
    s.push_back({layer_tensor(l, "ln2.b"), {d}});
    s.push_back({layer_tensor(l, "mlp.fc1.w"), {d, h}});
    s.push_back({layer_tensor(l, "mlp.fc1.b"), {h}});
    s.push_back({layer_tensor(l, "mlp.fc2.w"), {h, d}});
    s.push_back({layer_tensor(l, "mlp.fc2.b"), {d}});
  }
  s.push_back({"head.w", {d, static_cast<std::uint32_t>(cfg.num_classes)}});
  s.push_back({"head.b", {static_cast<std::uint32_t>(cfg.num_classes)}});
  return s;
}

// Named tensors in schema order. Rank-1 tensors are stored as 1 x n matrices.
class WeightBundle {
 public:
  WeightBundle() = default;

  // Zero-filled bundle with every schema tensor present.
  static WeightBundle zeros(const EncoderConfig& cfg) {
    WeightBundle w;
    for (auto& spec : weight_schema(cfg)) {
      const std::size_t rows = spec.dims.size() == 2 ? spec.dims[0] : 1;
      const std::size_t cols = spec.dims.back();
      w.add(spec.name, spec.dims, Matrix(rows, cols));
    }
    return w;
  }

  const Matrix& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorShapeError(name, "weight bundle has no tensor '" + name + "'");
    return entries_[it->second].values;
  }
  Matrix& get(const std::string& name) {
    return const_cast<Matrix&>(std::as_const(*this).get(name));
  }
  std::span<const float> vec(const std::string& name) const { return get(name).values(); }

  const Matrix& layer(std::size_t l, const char* suffix) const { return get(layer_tensor(l, suffix)); }

  struct Entry {
    std::string name;
    std::vector<std::uint32_t> dims;
    Matrix values;
  };
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  bool operator==(const WeightBundle& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = o.entries_[i];
      if (a.name != b.name || a.dims != b.dims) return false;
      if (std::memcmp(a.values.values().data(), b.values.values().data(), a.values.size() * sizeof(float)) != 0)
        return false;
    }
    return true;
  }

  // Every schema tensor present with the expected shape, in schema order.
  void validate(const EncoderConfig& cfg) const {
    const auto schema = weight_schema(cfg);
    for (std::size_t i = 0; i < std::max(schema.size(), entries_.size()); ++i) {
      if (i >= entries_.size()) {
        throw TensorShapeError(schema[i].name, "tensor '" + schema[i].name + "' missing from weight bundle");
      }
      if (i >= schema.size()) {
        throw TensorShapeError(entries_[i].name, "unexpected tensor '" + entries_[i].name +
                                                     "' (config has depth " + std::to_string(cfg.depth) + ")");
      }
      if (entries_[i].name != schema[i].name) {
        throw TensorShapeError(schema[i].name.starts_with("layer") ? schema[i].name : entries_[i].name,
                               "expected tensor '" + schema[i].name + "' at position " +
                                                     std::to_string(i) + ", found '" + entries_[i].name + "'");
      }
      if (entries_[i].dims != schema[i].dims) {
        throw TensorShapeError(entries_[i].name, "tensor '" + entries_[i].name + "' has shape " +
                                                     dims_string(entries_[i].dims) + ", expected " +
                                                     dims_string(schema[i].dims));
      }
    }
  }

  void add(std::string name, std::vector<std::uint32_t> dims, Matrix values) {
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(dims), std::move(values)});
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Weights and biases ~ U(-s, s) with s = 1/sqrt(d); layer-norm gains 1 and
// shifts 0.
inline WeightBundle init_random(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  WeightBundle w = WeightBundle::zeros(cfg);
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  for (const auto& e : w.entries()) {
    auto& m = w.get(e.name);
    const bool is_norm = e.name.ends_with(".g") || e.name.ends_with("ln1.b") || e.name.ends_with("ln2.b");
    if (is_norm) {
      std::fill(m.values().begin(), m.values().end(), e.name.ends_with(".g") ? 1.0F : 0.0F);
      continue;
    }
    for (auto& v : m.values()) v = static_cast<float>(rng.uniform(-s, s));
  }
  return w;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void read(char* dst, std::size_t n, const std::string& what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw TruncatedFileError(path_ + ": truncated while reading " + what);
    }
  }

  std::uint32_t u32(const std::string& what) {
    unsigned char b[4];
    read(reinterpret_cast<char*>(b), 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace detail

inline void save_weights(const WeightBundle& w, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kWeightMagic, 4);
  detail::put_u32(out, kWeightFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(w.entries().size()));
  for (const auto& e : w.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_u32(out, d);
    for (float v : e.values.values()) detail::put_f32(out, v);
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// Reads a TMW1 file and validates it against cfg before returning.
inline WeightBundle load_weights(const std::filesystem::path& path, const EncoderConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file '" + path.string() + "'");
  detail::ByteReader r(in, path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kWeightMagic, 4) != 0) throw BadMagicError(path.string() + ": not a TMW1 weight file");
  const auto version = r.u32("version");
  if (version != kWeightFileVersion) {
    throw BadMagicError(path.string() + ": unsupported TMW1 version " + std::to_string(version));
  }
  const auto count = r.u32("tensor count");
  const auto schema = weight_schema(cfg);
  WeightBundle w;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = r.u32("tensor name length");
    if (name_len > 4096) throw BadMagicError(path.string() + ": implausible tensor name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name");
    const auto rank = r.u32("rank of '" + name + "'");
    if (rank == 0 || rank > 2) {
      throw TensorShapeError(name, "tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32("dims of '" + name + "'");
    // Shapes are checked before the payload is read.
    if (t >= schema.size()) {
      throw TensorShapeError(name, "unexpected tensor '" + name + "' (config has depth " +
                                       std::to_string(cfg.depth) + ")");
    }
    if (schema[t].name != name) {
      const auto& offending = schema[t].name.starts_with("layer") ? schema[t].name : name;
      throw TensorShapeError(offending, "expected tensor '" + schema[t].name + "', found '" + name + "'");
    }
    if (schema[t].dims != dims) {
      throw TensorShapeError(name, "tensor '" + name + "' has shape " + dims_string(dims) + ", expected " +
                                       dims_string(schema[t].dims));
    }
    const std::size_t rows = rank == 2 ? dims[0] : 1;
    const std::size_t cols = dims.back();
    std::vector<char> raw(rows * cols * 4);
    r.read(raw.data(), raw.size(), "values of '" + name + "'");
    std::vector<float> values(rows * cols);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                 (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      values[i] = std::bit_cast<float>(bits);
    }
    w.add(std::move(name), std::move(dims), Matrix(rows, cols, std::move(values)));
  }
  w.validate(cfg);
  return w;
}

}  // namespace algm
