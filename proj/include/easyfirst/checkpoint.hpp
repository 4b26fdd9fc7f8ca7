#pragma once

// Binary checkpoints.
//
//   magic "EZFIRST\0" | u32 version | str config | str vocabulary |
//   u32 blob count | blobs: str name, u32 rank, u64 dims[rank], f32 values
//
// Integers and floats are little-endian; str is a u32 byte count followed by
// the bytes. The config is the key = value text form of the run config.

#include "easyfirst/config.hpp"
#include "easyfirst/datagen.hpp"
#include "easyfirst/model.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace easyfirst {

inline constexpr std::array<char, 8> checkpoint_magic{'E', 'Z', 'F', 'I', 'R', 'S', 'T', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }

 private:
  template <typename U>
  void le(U v) {
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(bytes, sizeof(U));
  }
  std::ostream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str(std::size_t limit = 1u << 20) {
    const auto n = u32();
    if (n > limit) fail("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) fail("unexpected end of file");
  }
  [[noreturn]] void fail(const std::string& what) const { throw DataError("checkpoint " + source_ + ": " + what); }

 private:
  template <typename U>
  U le() {
    unsigned char bytes[sizeof(U)];
    raw(reinterpret_cast<char*>(bytes), sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
  std::string source_;
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const RunConfig& cfg) {
  if (model.config().d_model != cfg.model.d_model || model.config().max_length != cfg.model.max_length) {
    throw ConfigError("checkpoint config does not describe the model being saved");
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    detail::BinaryWriter w(out);
    w.raw(checkpoint_magic.data(), checkpoint_magic.size());
    w.u32(checkpoint_version);
    w.str(to_text(cfg));
    w.str(std::string(Vocab::characters));
    const auto& entries = model.parameters().entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
      w.str(name);
      w.u32(static_cast<std::uint32_t>(tensor.rank()));
      for (auto d : tensor.shape()) w.u64(d);
      for (auto v : tensor.data()) w.f32(static_cast<float>(v));
    }
    if (!out) throw DataError("short write to checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename T>
struct LoadedCheckpoint {
  RunConfig config;
  Model<T> model;
};

/// Reads a checkpoint; the model is rebuilt from the stored config and every
/// stored blob must match a parameter by name and shape.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  detail::BinaryReader r(in, path.string());
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != checkpoint_magic) r.fail("bad magic (not a checkpoint file)");
  const auto version = r.u32();
  if (version != checkpoint_version) r.fail("unsupported format version " + std::to_string(version));
  RunConfig cfg;
  try {
    cfg = parse_config(r.str());
    cfg.model.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded config is invalid: ") + e.what());
  }
  const auto vocab = r.str();
  if (vocab != Vocab::characters) r.fail("vocabulary mismatch: stored '" + vocab + "'");
  Model<T> model(cfg.model, 0);
  const auto& entries = model.parameters().entries();
  const auto count = r.u32();
  if (count != entries.size()) {
    r.fail("holds " + std::to_string(count) + " tensors, model expects " + std::to_string(entries.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str();
    Tensor<T> target;
    try {
      target = model.parameters().find(name);
    } catch (const ConfigError&) {
      r.fail("unknown tensor '" + name + "'");
    }
    const auto rank = r.u32();
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    if (shape != target.shape()) {
      r.fail("tensor '" + name + "' has shape " + to_string(shape) + ", model expects " + to_string(target.shape()));
    }
    auto values = target.mutable_data();
    for (auto& v : values) v = static_cast<T>(r.f32());
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the last tensor");
  return {cfg, std::move(model)};
}

}  // namespace easyfirst
