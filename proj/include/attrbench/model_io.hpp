#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/model.hpp"
#include "attrbench/tensor.hpp"

// "ATTB" container. Every file starts with the magic, a version byte and a content byte ('M' for
// a model, 'A' for a keyed set of attribution maps). Integers are little-endian u32, payloads
// little-endian IEEE-754 doubles.
//
//   model:       u32 layer_count, u32 input_rank, u32 extents[rank],
//                per layer { u8 kind, u32 hyper_count, u32 hyper[], u32 tensor_count, tensor[] }
//   attribution: u32 entry_count, per entry { u32 key_len, key bytes, tensor }
//   tensor:      u32 rank, u32 extents[rank], f64 payload[prod(extents)]

namespace attrbench {

inline constexpr std::uint8_t kAttbVersion = 1;

namespace io {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) u32(static_cast<std::uint32_t>(e));
    for (double v : t.values()) f64(v);
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::uint8_t u8() {
    need(1, "u8");
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8, "f64");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(bits);
  }
  std::string raw(std::size_t n) {
    need(n, "string");
    std::string s(bytes_.begin() + static_cast<long>(pos_), bytes_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const std::size_t start = pos_;
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw FormatError("bad tensor rank " + std::to_string(rank), start);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t e = u32();
      if (e == 0) throw FormatError("zero tensor extent", pos_ - 4);
      shape.push_back(e);
    }
    const std::size_t n = shape_size(shape);
    need(n * 8, "tensor payload");
    std::vector<double> values(n);
    for (double& v : values) v = f64();
    return Tensor(std::move(shape), std::move(values));
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void header(char content) {
    const std::string magic = raw(4);
    if (magic != "ATTB") throw FormatError("missing ATTB magic", 0);
    const std::uint8_t version = u8();
    if (version != kAttbVersion) {
      throw FormatError("unsupported ATTB version " + std::to_string(version), 4);
    }
    const std::uint8_t kind = u8();
    if (kind != static_cast<std::uint8_t>(content)) {
      throw FormatError(std::string("expected ATTB content '") + content + "'", 5);
    }
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string("truncated ATTB file while reading ") + what, pos_);
    }
  }

  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path, 0);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void header(Writer& w, char content) {
  w.raw("ATTB");
  w.u8(kAttbVersion);
  w.u8(static_cast<std::uint8_t>(content));
}

}  // namespace io

inline std::vector<std::uint8_t> encode_model(const Model& model) {
  io::Writer w;
  io::header(w, 'M');
  w.u32(static_cast<std::uint32_t>(model.layer_count()));
  w.u32(static_cast<std::uint32_t>(model.input_shape().size()));
  for (std::size_t e : model.input_shape()) w.u32(static_cast<std::uint32_t>(e));
  for (const Layer& layer : model.layers()) {
    w.u8(static_cast<std::uint8_t>(kind_of(layer)));
    std::vector<std::uint32_t> hyper;
    std::vector<const Tensor*> tensors;
    if (const auto* d = std::get_if<Dense>(&layer)) {
      tensors = {&d->weight, &d->bias};
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      hyper = {static_cast<std::uint32_t>(c->stride), static_cast<std::uint32_t>(c->padding)};
      tensors = {&c->weight, &c->bias};
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
      hyper = {static_cast<std::uint32_t>(p->size), static_cast<std::uint32_t>(p->stride)};
    }
    w.u32(static_cast<std::uint32_t>(hyper.size()));
    for (std::uint32_t h : hyper) w.u32(h);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const Tensor* t : tensors) w.tensor(*t);
  }
  return w.bytes();
}

inline Model decode_model(std::vector<std::uint8_t> bytes) {
  io::Reader r(std::move(bytes));
  r.header('M');
  const std::uint32_t count = r.u32();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 3) throw FormatError("bad model input rank", r.offset() - 4);
  Shape input;
  for (std::uint32_t i = 0; i < rank; ++i) input.push_back(r.u32());
  std::vector<Layer> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint8_t kind = r.u8();
    const std::uint32_t nh = r.u32();
    std::vector<std::uint32_t> hyper(nh);
    for (auto& h : hyper) h = r.u32();
    const std::uint32_t nt = r.u32();
    std::vector<Tensor> tensors;
    for (std::uint32_t t = 0; t < nt; ++t) tensors.push_back(r.tensor());
    auto expect = [&](std::size_t h, std::size_t t) {
      if (hyper.size() != h || tensors.size() != t) {
        throw FormatError("layer record does not match its kind tag", at);
      }
    };
    switch (static_cast<LayerKind>(kind)) {
      case LayerKind::dense:
        expect(0, 2);
        layers.emplace_back(Dense{std::move(tensors[0]), std::move(tensors[1])});
        break;
      case LayerKind::conv2d:
        expect(2, 2);
        layers.emplace_back(Conv2d{std::move(tensors[0]), std::move(tensors[1]), hyper[0], hyper[1]});
        break;
      case LayerKind::relu:
        expect(0, 0);
        layers.emplace_back(Relu{});
        break;
      case LayerKind::maxpool2d:
        expect(2, 0);
        layers.emplace_back(MaxPool2d{hyper[0], hyper[1]});
        break;
      case LayerKind::flatten:
        expect(0, 0);
        layers.emplace_back(Flatten{});
        break;
      default:
        throw FormatError("unknown layer kind tag " + std::to_string(kind), at);
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last layer", r.offset());
  try {
    return Model(std::move(input), std::move(layers));
  } catch (const InvalidInput& e) {
    throw FormatError(std::string("inconsistent layer shapes: ") + e.what(), 0);
  }
}

inline void save_model(const Model& model, const std::string& path) {
  io::write_file(path, encode_model(model));
}

inline Model load_model(const std::string& path) { return decode_model(io::read_file(path)); }

/// Attribution maps keyed by "dataset/image/method/class".
using AttributionStore = std::map<std::string, Tensor>;

inline std::string attribution_key(const std::string& dataset, std::size_t image,
                                   const std::string& method, std::size_t cls) {
  return dataset + "/" + std::to_string(image) + "/" + method + "/" + std::to_string(cls);
}

inline std::vector<std::uint8_t> encode_attributions(const AttributionStore& store) {
  io::Writer w;
  io::header(w, 'A');
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (const auto& [key, t] : store) {
    w.u32(static_cast<std::uint32_t>(key.size()));
    w.raw(key);
    w.tensor(t);
  }
  return w.bytes();
}

inline AttributionStore decode_attributions(std::vector<std::uint8_t> bytes) {
  io::Reader r(std::move(bytes));
  r.header('A');
  const std::uint32_t n = r.u32();
  AttributionStore store;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = r.u32();
    std::string key = r.raw(len);
    store.emplace(std::move(key), r.tensor());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last entry", r.offset());
  return store;
}

}  // namespace attrbench
