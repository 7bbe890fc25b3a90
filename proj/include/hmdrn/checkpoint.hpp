#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hmdrn/model.hpp"

namespace hmdrn {

namespace fs = std::filesystem;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named, shaped, bit-exact serialization of every model parameter and buffer
// plus the fusion scalars and training metadata. Little-endian throughout;
// save -> load -> save reproduces the byte stream exactly.
template <typename T>
struct Checkpoint {
  ModelConfig model_cfg;
  std::uint32_t epoch = 0;
  double val_accuracy = 0;
  std::uint64_t seed = 0;
  ParamList<T> params;
};

namespace detail {

inline constexpr char kMagic[4] = {'H', 'M', 'D', 'R'};
inline constexpr std::uint32_t kVersion = 1;

struct ByteWriter {
  std::vector<std::uint8_t> bytes;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const std::uint8_t* p;
  const std::uint8_t* end;
  explicit ByteReader(const std::vector<std::uint8_t>& b)
      : p(b.data()), end(b.data() + b.size()) {}
  void need(std::size_t n) const {
    if (std::size_t(end - p) < n)
      throw CheckpointError("checkpoint truncated");
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p, n);
    p += n;
  }
  std::uint8_t u8() {
    need(1);
    return *p++;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
};

}  // namespace detail

template <typename T>
Checkpoint<T> make_checkpoint(Model<T>& model, std::uint32_t epoch,
                              double val_accuracy, std::uint64_t seed) {
  Checkpoint<T> ck;
  ck.model_cfg = model.cfg;
  ck.epoch = epoch;
  ck.val_accuracy = val_accuracy;
  ck.seed = seed;
  ParamList<T> live;
  model.collect(live);
  for (auto& p : live)
    ck.params.push_back({p.name, p.tensor.clone(), p.learnable});
  return ck;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint<T>& ck) {
  Rng rng(0);
  Model<T> model = Model<T>::init(ck.model_cfg, rng);
  ParamList<T> live;
  model.collect(live);
  if (live.size() != ck.params.size())
    throw CheckpointError("checkpoint/variant mismatch: parameter count");
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (live[i].name != ck.params[i].name ||
        live[i].tensor.shape() != ck.params[i].tensor.shape())
      throw CheckpointError("checkpoint/variant mismatch at " +
                            ck.params[i].name);
    live[i].tensor.values() = ck.params[i].tensor.values();
  }
  return model;
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<T>& ck) {
  detail::ByteWriter w;
  w.raw(detail::kMagic, 4);
  w.u32(detail::kVersion);
  w.u8(ck.model_cfg.backbone == BackboneKind::Conv4 ? 0 : 1);
  w.u8(std::uint8_t(ck.model_cfg.variant));
  w.u8(sizeof(T) == 4 ? 0 : 1);
  w.u8(0);
  w.u32(std::uint32_t(ck.model_cfg.mtfem.layers));
  w.u32(std::uint32_t(ck.model_cfg.mtfem.heads));
  w.u32(std::uint32_t(ck.model_cfg.mtfem.hidden_ratio));
  w.u32(ck.model_cfg.mtfem.use_bias ? 1 : 0);
  w.u32(std::uint32_t(ck.model_cfg.conv4.channels));
  w.u32(std::uint32_t(ck.model_cfg.conv4.blocks));
  w.u32(std::uint32_t(ck.model_cfg.resnet.channels.size()));
  for (std::size_t c : ck.model_cfg.resnet.channels) w.u32(std::uint32_t(c));
  w.u32(std::uint32_t(ck.model_cfg.resnet.dropblock_size));
  w.f64(ck.model_cfg.resnet.dropblock_keep);
  w.u32(ck.epoch);
  w.f64(ck.val_accuracy);
  w.u64(ck.seed);
  w.u32(std::uint32_t(ck.params.size()));
  std::uint64_t payload = 0;
  for (const auto& p : ck.params) {
    w.str(p.name);
    w.u8(p.learnable ? 1 : 0);
    w.u32(std::uint32_t(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u64(d);
    payload += p.tensor.size() * sizeof(T);
  }
  w.u64(payload);
  for (const auto& p : ck.params)
    w.raw(p.tensor.data(), p.tensor.size() * sizeof(T));
  return w.bytes;
}

template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, detail::kMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic");
  if (r.u32() != detail::kVersion)
    throw CheckpointError("unsupported checkpoint version");
  Checkpoint<T> ck;
  ck.model_cfg.backbone = r.u8() == 0 ? BackboneKind::Conv4
                                      : BackboneKind::ResNet12;
  ck.model_cfg.variant = Variant(r.u8());
  const std::uint8_t dtype = r.u8();
  if ((sizeof(T) == 4 && dtype != 0) || (sizeof(T) == 8 && dtype != 1))
    throw CheckpointError("checkpoint dtype mismatch");
  r.u8();
  ck.model_cfg.mtfem.layers = r.u32();
  ck.model_cfg.mtfem.heads = r.u32();
  ck.model_cfg.mtfem.hidden_ratio = r.u32();
  ck.model_cfg.mtfem.use_bias = r.u32() != 0;
  ck.model_cfg.conv4.channels = r.u32();
  ck.model_cfg.conv4.blocks = r.u32();
  ck.model_cfg.resnet.channels.resize(r.u32());
  for (auto& c : ck.model_cfg.resnet.channels) c = r.u32();
  ck.model_cfg.resnet.dropblock_size = r.u32();
  ck.model_cfg.resnet.dropblock_keep = r.f64();
  ck.epoch = r.u32();
  ck.val_accuracy = r.f64();
  ck.seed = r.u64();
  const std::uint32_t count = r.u32();
  std::uint64_t payload = 0;
  std::vector<std::pair<std::string, Shape>> manifest;
  std::vector<bool> learnable;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    learnable.push_back(r.u8() != 0);
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    payload += shape_numel(shape) * sizeof(T);
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  const std::uint64_t declared = r.u64();
  if (declared != payload)
    throw CheckpointError("checkpoint payload length mismatch");
  r.need(payload);
  if (std::size_t(r.end - r.p) != payload)
    throw CheckpointError("checkpoint trailing bytes");
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor<T> t(manifest[i].second);
    r.raw(t.data(), t.size() * sizeof(T));
    ck.params.push_back({manifest[i].first, std::move(t), learnable[i]});
  }
  return ck;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const fs::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace hmdrn
