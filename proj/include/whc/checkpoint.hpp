#pragma once

// Checkpoint file, all integers little-endian:
//
//   "WHCK"  u32 version
//   u64 config length, config JSON bytes
//   u64 tensor count, then per tensor:
//     u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//     u32 rank, u64 dims[rank], raw values
//   u64 FNV-1a 64 of every preceding byte

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "whc/agent.hpp"
#include "whc/config.hpp"
#include "whc/rng.hpp"

namespace whc {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'W', 'H', 'C', 'K'};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointNotFound : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian values
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::ordered_json config;
  std::vector<CheckpointTensor> tensors;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* out = p_ + pos_;
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) const {
    if (k > n_ - pos_) throw CheckpointError("truncated checkpoint");
  }

  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checksum(const std::uint8_t* p, std::size_t n) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(p), n));
}

template <typename T>
std::vector<std::uint8_t> encode_values(std::span<const T> v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  ByteWriter w;
  for (T x : v) w.put(std::bit_cast<U>(x));
  return std::move(w.buffer());
}

template <typename T>
void decode_values(const std::vector<std::uint8_t>& bytes, std::span<T> out) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  ByteReader r(bytes.data(), bytes.size());
  for (auto& x : out) x = std::bit_cast<T>(r.get<U>());
}

/// Write to a sibling temp file, then rename over the destination.
inline void write_atomically(const std::filesystem::path& path, const void* data, std::size_t n) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(ck.version);
  const std::string cfg = ck.config.dump();
  w.put(static_cast<std::uint64_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  w.put(static_cast<std::uint64_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.put(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put(static_cast<std::uint8_t>(t.dtype));
    w.put(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(t.bytes.data(), t.bytes.size());
  }
  auto& buf = w.buffer();
  const auto sum = detail::checksum(buf.data(), buf.size());
  w.put(sum);
  return std::move(buf);
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < 4 + 4 + 8) throw CheckpointError("truncated checkpoint");
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader tail(bytes.data() + body, 8);
  if (tail.get<std::uint64_t>() != detail::checksum(bytes.data(), body)) {
    throw CheckpointError("checkpoint checksum mismatch");
  }
  detail::ByteReader r(bytes.data(), body);
  r.take(4);
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(ck.version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto cfg_len = r.get<std::uint64_t>();
  const auto* cfg = r.take(cfg_len);
  try {
    ck.config = nlohmann::ordered_json::parse(cfg, cfg + cfg_len);
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint config is not valid JSON");
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = r.get<std::uint32_t>();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto dt = r.get<std::uint8_t>();
    if (dt != 1 && dt != 2) throw CheckpointError("unknown dtype tag in " + t.name);
    t.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= t.shape.back();
    }
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    const auto* data = r.take(n * width);
    t.bytes.assign(data, data + n * width);
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

template <typename T>
Checkpoint make_checkpoint(ModelParams<T>& params, const RunConfig& cfg) {
  Checkpoint ck;
  ck.config = run_config_to_json(cfg);
  for (auto& p : params.parameters()) {
    ck.tensors.push_back({p.name, dtype_of<T>(), p.tensor.shape(),
                          detail::encode_values<T>(p.tensor.data())});
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ModelParams<T>& params,
                     const RunConfig& cfg) {
  auto bytes = serialize_checkpoint(make_checkpoint(params, cfg));
  detail::write_atomically(path, bytes.data(), bytes.size());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw CheckpointNotFound("checkpoint not found: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Rebuilds the model described by the checkpoint and fills in its values.
/// Nothing is returned unless every tensor matches.
template <typename T>
std::pair<ModelParams<T>, RunConfig> load_model(const Checkpoint& ck) {
  RunConfig cfg;
  try {
    cfg = run_config_from_json(ck.config);
    cfg.validate();
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  auto params = init_model<T>(cfg.model, 0);
  auto list = params.parameters();
  if (list.size() != ck.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ck.tensors.size()) +
                          " tensors, model expects " + std::to_string(list.size()));
  }
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& t = ck.tensors[i];
    if (t.name != list[i].name) {
      throw CheckpointError("checkpoint tensor " + t.name + " where " + list[i].name + " expected");
    }
    if (t.shape != list[i].tensor.shape()) {
      throw CheckpointError("checkpoint tensor " + t.name + " has shape " + shape_str(t.shape) +
                            ", model expects " + shape_str(list[i].tensor.shape()));
    }
    if (t.dtype != dtype_of<T>()) {
      throw CheckpointError("checkpoint tensor " + t.name + " is " +
                            (t.dtype == DType::f32 ? "32" : "64") + "-bit; rerun with --precision " +
                            (t.dtype == DType::f32 ? "32" : "64"));
    }
  }
  for (std::size_t i = 0; i < list.size(); ++i)
    detail::decode_values<T>(ck.tensors[i].bytes, list[i].tensor.mutable_data());
  return {std::move(params), cfg};
}

template <typename T>
std::pair<ModelParams<T>, RunConfig> load_checkpoint(const std::filesystem::path& path) {
  return load_model<T>(read_checkpoint(path));
}

}  // namespace whc
