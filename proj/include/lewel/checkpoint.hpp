#pragma once

// Binary training artifact. One file carries everything needed to resume or
// evaluate a run: a format version, the resolved config as canonical text,
// free-form notes (small key/value strings such as queue geometry), a step
// counter, and a named tensor table holding online/target parameters,
// optimizer state, and any auxiliary buffers.
//
// Layout (integers little-endian):
//   "LWLC" | u32 version | u64 step
//   u64 config length | config bytes
//   u32 note count    | per note: u32 key length, key, u32 value length, value
//   u32 tensor count  | per tensor: u32 name length, name,
//                       u32 dtype length, dtype ("f32"/"f64"),
//                       u32 ndim, ndim x u64 dims,
//                       u64 payload length, raw payload
//   u32 CRC-32 (poly 0xEDB88320) over every byte above

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "lewel/common.hpp"
#include "lewel/nn.hpp"
#include "lewel/tensor.hpp"

namespace lewel {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are written in native byte order and declared little-endian");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'L', 'W', 'L', 'C'};

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto base = out.size();
  out.resize(base + 4);
  std::memcpy(out.data() + base, &v, 4);
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  const auto base = out.size();
  out.resize(base + 8);
  std::memcpy(out.data() + base, &v, 8);
}

inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

// Bounds-checked sequential reader over a loaded file.
struct ByteReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (n > buf.size() - pos) throw DataError("checkpoint: truncated record");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data()) + pos, n);
    pos += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> b(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                                buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return b;
  }
};

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else if constexpr (std::is_same_v<T, double>) {
    return "f64";
  } else {
    static_assert(!sizeof(T), "checkpoint tensors must be f32 or f64");
  }
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return sizeof(float);
  if (dtype == "f64") return sizeof(double);
  throw DataError(cat("checkpoint: unknown dtype \"", dtype, "\""));
}

}  // namespace detail

struct TensorRecord {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<std::uint8_t> payload;  // raw little-endian element bytes
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t step = 0;
  std::string config_text;
  std::vector<std::pair<std::string, std::string>> notes;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& rec : tensors)
      if (rec.name == name) return &rec;
    return nullptr;
  }
  bool has(const std::string& name) const { return find(name) != nullptr; }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (has(name)) throw DataError(cat("checkpoint: duplicate tensor name \"", name, "\""));
    TensorRecord rec;
    rec.name = name;
    rec.dtype = detail::dtype_name<T>();
    rec.shape = t.shape();
    const auto src = t.data();
    rec.payload.resize(src.size() * sizeof(T));
    if (!src.empty()) std::memcpy(rec.payload.data(), src.data(), rec.payload.size());
    tensors.push_back(std::move(rec));
  }

  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const TensorRecord* rec = find(name);
    if (rec == nullptr) throw DataError(cat("checkpoint: no tensor named \"", name, "\""));
    if (rec->dtype != detail::dtype_name<T>())
      throw DataError(cat("checkpoint: tensor \"", name, "\" is ", rec->dtype, ", requested ",
                          detail::dtype_name<T>()));
    std::vector<T> vals(rec->payload.size() / sizeof(T));
    if (!vals.empty()) std::memcpy(vals.data(), rec->payload.data(), rec->payload.size());
    return Tensor<T>::from_data(rec->shape, std::move(vals));
  }

  void set_note(const std::string& key, const std::string& value) {
    for (auto& [k, v] : notes)
      if (k == key) {
        v = value;
        return;
      }
    notes.emplace_back(key, value);
  }

  const std::string* note(const std::string& key) const {
    for (const auto& [k, v] : notes)
      if (k == key) return &v;
    return nullptr;
  }
};

// Store every tensor of a collected parameter/buffer set under a name prefix.
template <typename T>
void add_group(Checkpoint& ck, const std::string& prefix, const NamedTensors<T>& group) {
  for (const auto& [name, t] : group.items) ck.add(prefix + name, t);
}

// Copy stored values back into live tensors. Collected sets alias the model's
// nodes, so writing through them moves the network itself.
template <typename T>
void restore_group(const Checkpoint& ck, const std::string& prefix, NamedTensors<T>& group) {
  for (auto& [name, t] : group.items) {
    const Tensor<T> stored = ck.tensor<T>(prefix + name);
    if (stored.shape() != t.shape())
      throw DataError(cat("checkpoint: tensor \"", prefix + name, "\" has shape ",
                          shape_str(stored.shape()), ", model expects ", shape_str(t.shape())));
    const auto src = stored.data();
    auto dst = t.mutable_data();
    if (!src.empty()) std::memcpy(dst.data(), src.data(), src.size() * sizeof(T));
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, ck.version);
  detail::put_u64(out, ck.step);
  detail::put_u64(out, ck.config_text.size());
  out.insert(out.end(), ck.config_text.begin(), ck.config_text.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ck.notes.size()));
  for (const auto& [key, value] : ck.notes) {
    detail::put_str(out, key);
    detail::put_str(out, value);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& rec : ck.tensors) {
    detail::put_str(out, rec.name);
    detail::put_str(out, rec.dtype);
    detail::put_u32(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (const std::size_t dim : rec.shape) detail::put_u64(out, dim);
    detail::put_u64(out, rec.payload.size());
    out.insert(out.end(), rec.payload.begin(), rec.payload.end());
  }
  detail::put_u32(out, detail::crc32(out.data(), out.size()));
  detail::write_file_bytes(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file_bytes(path);
  if (bytes.size() < 4 + sizeof(std::uint32_t))
    throw DataError(cat("checkpoint: file too small: ", path));

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (stored_crc != detail::crc32(bytes.data(), bytes.size() - 4))
    throw DataError(cat("checkpoint: checksum mismatch: ", path));

  detail::ByteReader r{bytes};
  if (std::memcmp(r.str(4).data(), kCheckpointMagic, 4) != 0)
    throw DataError(cat("checkpoint: bad magic: ", path));

  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    throw DataError(cat("checkpoint: unsupported version ", ck.version, " (expected ",
                        kCheckpointVersion, "): ", path));
  ck.step = r.u64();
  ck.config_text = r.str(r.u64());

  const std::uint32_t note_count = r.u32();
  ck.notes.reserve(note_count);
  for (std::uint32_t i = 0; i < note_count; ++i) {
    std::string key = r.str(r.u32());
    std::string value = r.str(r.u32());
    ck.notes.emplace_back(std::move(key), std::move(value));
  }

  const std::uint32_t tensor_count = r.u32();
  ck.tensors.reserve(tensor_count);
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    TensorRecord rec;
    rec.name = r.str(r.u32());
    rec.dtype = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    rec.shape.resize(ndim);
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint64_t dim = r.u64();
      rec.shape[d] = static_cast<std::size_t>(dim);
      if (dim != 0 && numel > UINT64_MAX / dim)
        throw DataError(cat("checkpoint: tensor \"", rec.name, "\" shape overflows"));
      numel *= dim;
    }
    const std::uint64_t payload_len = r.u64();
    if (payload_len != numel * detail::dtype_size(rec.dtype))
      throw DataError(cat("checkpoint: tensor \"", rec.name, "\" payload length ", payload_len,
                          " does not match its shape"));
    rec.payload = r.bytes(static_cast<std::size_t>(payload_len));
    ck.tensors.push_back(std::move(rec));
  }

  if (r.pos != bytes.size() - 4)
    throw DataError(cat("checkpoint: ", bytes.size() - 4 - r.pos, " unexpected trailing bytes: ", path));
  return ck;
}

}  // namespace lewel
