// Copyright (c) 2026 The CatSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// File formats.
//
// CSEG container, little-endian throughout:
//   "CSEG" | u32 version (1) | u32 tensor count
//   per tensor: u16 name length | name bytes (UTF-8) | u8 dtype (0 f32, 1 f64)
//               | u8 ndim | ndim x u32 dims | row-major payload
// Embedding files hold "image_embeddings" [H,W,d], "text_embeddings" [N,d],
// optional "guidance_1"/"guidance_2", and per-patch sets with the suffix
// "_patch<i>". Class names live in the sidecar "<stem>.classes.json".
//
// Segmentation maps are binary PGM (P5, maxval 255) with the legend in the
// same kind of sidecar.

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "catseg/evaluation.hpp"

namespace catseg {

static_assert(std::endian::native == std::endian::little, "CSEG I/O assumes a little-endian host");

inline constexpr char kCsegMagic[4] = {'C', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCsegVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct NamedTensor {
  std::string name;
  AnyTensor value;
};

inline const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

template <class T>
Tensor<T> as(const AnyTensor& t) {
  return std::visit([](const auto& x) { return x.template cast<T>(); }, t);
}

// ---------------------------------------------------------------- bytes

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace detail {

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
  std::uint8_t b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  out.insert(out.end(), b, b + sizeof(V));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : b_(bytes) {}

  template <class V>
  V get(const std::string& what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  void need(std::size_t n, const std::string& what) const {
    if (b_.size() - pos_ < n) throw ParseError("truncated " + what, pos_);
  }

  const std::uint8_t* take(std::size_t n, const std::string& what) {
    need(n, what);
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xFFFF) throw ContractError("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw ContractError("tensor rank too large: " + name);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw ContractError("dimension too large in " + name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
  out.insert(out.end(), p, p + t.size() * sizeof(T));
}

template <class T>
Tensor<T> take_payload(Reader& r, Shape shape, const std::string& name) {
  const std::size_t n = numel(shape);
  r.need(n * sizeof(T), "payload of tensor '" + name + "'");
  std::vector<T> v(n);
  std::memcpy(v.data(), r.take(n * sizeof(T), name), n * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_cseg(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(kCsegMagic, kCsegMagic + 4);
  detail::put<std::uint32_t>(out, kCsegVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::visit([&](const auto& x) { detail::put_tensor(out, t.name, x); }, t.value);
  }
  return out;
}

inline std::vector<NamedTensor> decode_cseg(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, kCsegMagic, 4) != 0) throw ParseError("bad magic, not a CSEG file", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCsegVersion) {
    throw ParseError("unsupported CSEG version " + std::to_string(version), 4);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto len = r.get<std::uint16_t>("name length of tensor " + std::to_string(i));
    const auto* np = r.take(len, "name of tensor " + std::to_string(i));
    std::string name(reinterpret_cast<const char*>(np), len);
    if (seen.count(name)) throw ParseError("duplicate tensor '" + name + "'", at);
    seen[name] = true;
    const std::size_t dt_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype of tensor '" + name + "'");
    const auto ndim = r.get<std::uint8_t>("rank of tensor '" + name + "'");
    if (ndim == 0) throw ParseError("tensor '" + name + "' has rank 0", dt_at + 1);
    Shape shape;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      const std::size_t d_at = r.pos();
      const auto d = r.get<std::uint32_t>("shape of tensor '" + name + "'");
      if (d == 0) throw ParseError("tensor '" + name + "' has a zero dimension", d_at);
      shape.push_back(d);
    }
    if (dtype == 0) {
      out.push_back({name, detail::take_payload<float>(r, shape, name)});
    } else if (dtype == 1) {
      out.push_back({name, detail::take_payload<double>(r, shape, name)});
    } else {
      throw ParseError("tensor '" + name + "' has unknown dtype " + std::to_string(dtype), dt_at);
    }
  }
  if (!r.done()) throw ParseError("trailing bytes after the last tensor", r.pos());
  return out;
}

inline void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& t) {
  write_file(path, encode_cseg(t));
}

inline std::vector<NamedTensor> read_tensors(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_cseg(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  }
}

// ---------------------------------------------------------- sidecars

/// "<dir>/<stem>.classes.json" for "<dir>/<stem>.<ext>".
inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".classes.json");
  return p;
}

inline void write_class_names(const std::filesystem::path& path,
                              const std::vector<std::string>& names) {
  const std::string s = nlohmann::json(names).dump(2) + "\n";
  write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

inline std::vector<std::string> read_class_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing class list " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (!j.is_array()) throw ContractError(path.string() + ": class list must be a JSON array");
    return j.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------- embeddings

/// The whole-image set plus optional per-patch sets.
template <class T>
struct CsegContents {
  EmbeddingSet<T> whole;
  std::vector<EmbeddingSet<T>> patches;
};

inline std::string patch_suffix(std::size_t i) { return "_patch" + std::to_string(i); }

template <class T>
void append_set(std::vector<NamedTensor>& out, const EmbeddingSet<T>& e, const std::string& suffix) {
  e.validate();
  out.push_back({"image_embeddings" + suffix, e.image});
  out.push_back({"text_embeddings" + suffix, e.text});
  for (std::size_t j = 0; j < e.guidance.size(); ++j) {
    out.push_back({"guidance_" + std::to_string(j + 1) + suffix, e.guidance[j]});
  }
}

template <class T>
void write_cseg(const EmbeddingSet<T>& whole, const std::vector<EmbeddingSet<T>>& patches,
                const std::filesystem::path& path) {
  if (whole.guidance.size() > 2) throw ContractError("at most two guidance maps are stored");
  std::vector<NamedTensor> t;
  append_set(t, whole, "");
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].class_names != whole.class_names) {
      throw ContractError("patch " + std::to_string(i) + " uses a different class list");
    }
    append_set(t, patches[i], patch_suffix(i));
  }
  write_tensors(path, t);
  write_class_names(sidecar_path(path), whole.class_names);
}

template <class T>
void write_cseg(const EmbeddingSet<T>& emb, const std::filesystem::path& path) {
  write_cseg(emb, std::vector<EmbeddingSet<T>>{}, path);
}

namespace detail {

template <class T>
EmbeddingSet<T> take_set(std::map<std::string, const AnyTensor*>& by_name,
                         const std::vector<std::string>& names, const std::string& suffix,
                         const std::string& file) {
  auto need = [&](const std::string& n) -> const AnyTensor& {
    auto it = by_name.find(n + suffix);
    if (it == by_name.end()) throw ContractError(file + ": missing tensor \"" + n + suffix + "\"");
    const AnyTensor& t = *it->second;
    by_name.erase(it);
    return t;
  };
  EmbeddingSet<T> e;
  e.image = as<T>(need("image_embeddings"));
  e.text = as<T>(need("text_embeddings"));
  e.class_names = names;
  for (std::size_t j = 1; j <= 2; ++j) {
    const std::string g = "guidance_" + std::to_string(j) + suffix;
    auto it = by_name.find(g);
    if (it == by_name.end()) break;
    e.guidance.push_back(as<T>(*it->second));
    by_name.erase(it);
  }
  try {
    e.validate();
  } catch (const Error& err) {
    throw ContractError(file + ": " + err.what());
  }
  return e;
}

}  // namespace detail

template <class T>
CsegContents<T> read_cseg(const std::filesystem::path& path) {
  const auto tensors = read_tensors(path);
  const auto names = read_class_names(sidecar_path(path));
  std::map<std::string, const AnyTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  CsegContents<T> c{detail::take_set<T>(by_name, names, "", path.string()), {}};
  for (std::size_t i = 0; by_name.count("image_embeddings" + patch_suffix(i)); ++i) {
    c.patches.push_back(detail::take_set<T>(by_name, names, patch_suffix(i), path.string()));
    if (c.patches.back().image.dim(2) != c.whole.image.dim(2)) {
      throw ContractError(path.string() + ": patch " + std::to_string(i) + " has a different width");
    }
  }
  if (!by_name.empty()) {
    throw ContractError(path.string() + ": unexpected tensor \"" + by_name.begin()->first + "\"");
  }
  return c;
}

// ---------------------------------------------------------- weights

template <class T>
void save_weights(const ParameterStore<T>& store, const std::filesystem::path& path) {
  std::vector<NamedTensor> t;
  for (const auto& p : store.all()) t.push_back({p.name, p.value});
  write_tensors(path, t);
}

/// Replaces every parameter of `store` with the same-named tensor of the file.
/// With `allow_extra`, tensors the model does not have are ignored.
template <class T>
void load_weights(ParameterStore<T>& store, const std::filesystem::path& path,
                  bool allow_extra = false) {
  const auto tensors = read_tensors(path);
  std::map<std::string, const AnyTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  if (!allow_extra && by_name.size() != store.size()) {
    throw ContractError(path.string() + ": holds " + std::to_string(by_name.size()) +
                        " tensors, model has " + std::to_string(store.size()) + " parameters");
  }
  for (const auto& p : store.all()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ContractError(path.string() + ": missing weight " + p.name);
    if (shape_of(*it->second) != p.value.shape()) {
      throw DimensionError(path.string() + ": weight " + p.name + " has shape " +
                           shape_str(shape_of(*it->second)) + ", model expects " +
                           shape_str(p.value.shape()));
    }
  }
  for (const auto& p : store.all()) store.get(p.name) = as<T>(*by_name.at(p.name));
}

// ---------------------------------------------------------- images

/// Reads a [3,H,W] image from a binary PPM (P6, values scaled to [0,1]) or
/// from a CSEG file holding a tensor named "image".
template <class T>
Tensor<T> read_image(const std::filesystem::path& path);

// ---------------------------------------------------------- PGM maps

namespace detail {

/// Parses a P5/P6 header; returns width, height, maxval and the payload offset.
struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0, offset = 0;
};

inline PnmHeader parse_pnm(const std::vector<std::uint8_t>& b, const char* magic) {
  if (b.size() < 2 || b[0] != magic[0] || b[1] != magic[1]) {
    throw ParseError(std::string("expected a ") + magic + " header", 0);
  }
  std::size_t pos = 2;
  auto number = [&](const char* what) {
    for (;;) {
      while (pos < b.size() && std::isspace(b[pos])) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= b.size() || !std::isdigit(b[pos])) throw ParseError(std::string("bad ") + what, pos);
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + (b[pos++] - '0');
    return v;
  };
  PnmHeader h;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (pos >= b.size() || !std::isspace(b[pos])) throw ParseError("missing header terminator", pos);
  h.offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw ParseError("zero image size", h.offset);
  if (h.maxval == 0 || h.maxval > 255) throw ParseError("maxval must be 1..255", h.offset);
  return h;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_pgm(const SegmentationMap& map) {
  map.validate();
  const std::string header =
      "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (auto v : map.indices) {
    if (v > 255) throw UnsupportedError("class index " + std::to_string(v) + " does not fit a PGM byte");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

inline void write_segmap(const SegmentationMap& map, const std::filesystem::path& path) {
  if (map.legend.size() > 256) {
    throw UnsupportedError(std::to_string(map.legend.size()) +
                           " classes exceed the 256 a PGM map can hold");
  }
  write_file(path, encode_pgm(map));
  write_class_names(sidecar_path(path), map.legend);
}

inline SegmentationMap read_segmap(const std::filesystem::path& path) {
  const auto b = read_file(path);
  SegmentationMap m;
  try {
    const auto h = detail::parse_pnm(b, "P5");
    if (b.size() - h.offset != h.width * h.height) {
      throw ParseError("payload holds " + std::to_string(b.size() - h.offset) + " bytes, expected " +
                           std::to_string(h.width * h.height),
                       h.offset);
    }
    m.height = h.height;
    m.width = h.width;
    m.indices.assign(b.begin() + static_cast<std::ptrdiff_t>(h.offset), b.end());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  }
  if (std::filesystem::exists(sidecar_path(path))) m.legend = read_class_names(sidecar_path(path));
  m.validate();
  return m;
}

template <class T>
Tensor<T> read_image(const std::filesystem::path& path) {
  if (path.extension() == ".cseg") {
    for (const auto& t : read_tensors(path)) {
      if (t.name == "image") {
        auto img = as<T>(t.value);
        if (img.rank() != 3 || img.dim(0) != 3) {
          throw DimensionError(path.string() + ": image must be [3,H,W], got " + shape_str(img.shape()));
        }
        return img;
      }
    }
    throw ContractError(path.string() + ": no tensor named \"image\"");
  }
  const auto b = read_file(path);
  const auto h = detail::parse_pnm(b, "P6");
  if (b.size() - h.offset != 3 * h.width * h.height) {
    throw ParseError(path.string() + ": truncated PPM payload", h.offset);
  }
  Tensor<T> img({3, h.height, h.width});
  const std::size_t plane = h.width * h.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      img[c * plane + p] = static_cast<T>(b[h.offset + 3 * p + c]) / static_cast<T>(h.maxval);
    }
  return img;
}

}  // namespace catseg
