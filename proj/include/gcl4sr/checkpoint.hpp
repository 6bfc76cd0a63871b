#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "gcl4sr/error.hpp"
#include "gcl4sr/model.hpp"
#include "gcl4sr/rng.hpp"

// Checkpoint layout (all integers little-endian):
//
//   "GCL4SRCK"                      8-byte magic
//   u32 version                     currently 1
//   u64 n, n bytes                  model config as "key=value\n" lines
//   u64 array count
//   per array:
//     u32 n, n bytes                name
//     u32 rank, u64 dims[rank]
//     f64 values[product(dims)]     IEEE-754 binary64, row-major
//   u64 checksum                    FNV-1a 64 over every preceding byte

namespace gcl4sr {

inline constexpr std::string_view kCheckpointMagic = "GCL4SRCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.append(s); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& str() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw IoError("checkpoint: truncated file");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string format_model_config(const ModelConfig& c) {
  char dropout[32];
  std::snprintf(dropout, sizeof dropout, "%.17g", c.dropout);
  std::ostringstream os;
  os << "item_count=" << c.item_count << '\n'
     << "user_count=" << c.user_count << '\n'
     << "dim=" << c.dim << '\n'
     << "heads=" << c.heads << '\n'
     << "layers=" << c.layers << '\n'
     << "max_len=" << c.max_len << '\n'
     << "dropout=" << dropout << '\n';
  return os.str();
}

inline ModelConfig parse_model_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint: malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError(std::string("checkpoint: config block lacks '") + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.item_count = std::stoull(need("item_count"));
  c.user_count = std::stoull(need("user_count"));
  c.dim = std::stoull(need("dim"));
  c.heads = std::stoull(need("heads"));
  c.layers = std::stoull(need("layers"));
  c.max_len = std::stoull(need("max_len"));
  c.dropout = std::stod(need("dropout"));
  c.validate();
  return c;
}

inline std::string serialize_checkpoint(const ModelParams& params) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string cfg = format_model_config(params.config());
  w.u64(cfg.size());
  w.bytes(cfg);
  w.u64(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& t = params.value(i);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  const std::uint64_t checksum = fnv1a64(w.str());
  w.u64(checksum);
  return w.take();
}

inline ModelParams deserialize_checkpoint(std::string_view data) {
  if (data.size() < kCheckpointMagic.size() + 12) throw IoError("checkpoint: file too small");
  const std::string_view body = data.substr(0, data.size() - 8);
  detail::ByteReader tail(data.substr(data.size() - 8));
  if (tail.u64() != fnv1a64(body)) throw IoError("checkpoint: checksum mismatch");

  detail::ByteReader r(body);
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t cfg_len = r.u64();
  ModelParams params(parse_model_config(r.bytes(cfg_len)));
  const std::uint64_t count = r.u64();
  if (count != params.count()) throw IoError("checkpoint: array count does not match the model config");
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string_view name = r.bytes(name_len);
    if (name != params.name(i)) {
      throw IoError("checkpoint: expected array '" + params.name(i) + "', found '" + std::string(name) + "'");
    }
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    Tensor& t = params.value(i);
    if (shape != t.shape()) {
      throw IoError("checkpoint: array '" + std::string(name) + "' has shape " + to_string(shape) + ", expected " +
                    to_string(t.shape()));
    }
    for (double& v : t.values()) v = r.f64();
  }
  if (r.position() != body.size()) throw IoError("checkpoint: trailing bytes");
  return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  const std::string bytes = serialize_checkpoint(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(data);
}

inline std::uint64_t checkpoint_hash(const ModelParams& params) { return fnv1a64(serialize_checkpoint(params)); }

}  // namespace gcl4sr
