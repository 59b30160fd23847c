#pragma once

// Portable little-endian tensor serialisation.
//
// Tensor record:
//   "SPTN" | u32 version | u32 rank | u64 dims[rank] | f64 payload[numel]
//
// Checkpoint file:
//   "SPCK" | u32 version | u32 entry_count | u64 config_len | config bytes
//   entry_count x ( u32 name_len | name bytes | u64 offset )
//   tensor records, each at its absolute byte offset
//
// The config block is plain key=value text, one pair per line.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "segprompt/errors.hpp"
#include "segprompt/tensor.hpp"

namespace segprompt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) fail("offset beyond end of data");
    pos_ = pos;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& msg) const { throw IoError(what_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated data");
  }
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out = "SPTN";
  detail::put_u32(out, kTensorFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u64(out, d);
  for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Tensor decode_tensor(detail::ByteReader& in) {
  if (in.take(4) != "SPTN") in.fail("bad tensor magic");
  if (in.u32() != kTensorFormatVersion) in.fail("unsupported tensor version");
  const std::uint32_t rank = in.u32();
  Shape shape(rank);
  for (auto& d : shape) d = in.u64();
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(in.u64());
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor decode_tensor(std::string_view bytes) {
  detail::ByteReader r(bytes, "tensor record");
  return decode_tensor(r);
}

struct Checkpoint {
  std::string config;  // key=value lines
  ParamList tensors;

  const Tensor* find(std::string_view name) const {
    for (const auto& nt : tensors)
      if (nt.name == name) return &nt.tensor;
    return nullptr;
  }
};

inline std::string encode_checkpoint(const ParamList& tensors, const std::string& config) {
  std::string header = "SPCK";
  detail::put_u32(header, kCheckpointFormatVersion);
  detail::put_u32(header, static_cast<std::uint32_t>(tensors.size()));
  detail::put_u64(header, config.size());
  header += config;
  std::size_t manifest_size = 0;
  for (const auto& nt : tensors) manifest_size += 4 + nt.name.size() + 8;

  std::string body;
  std::size_t offset = header.size() + manifest_size;
  std::string manifest;
  for (const auto& nt : tensors) {
    detail::put_u32(manifest, static_cast<std::uint32_t>(nt.name.size()));
    manifest += nt.name;
    detail::put_u64(manifest, offset);
    auto rec = encode_tensor(nt.tensor);
    offset += rec.size();
    body += rec;
  }
  return header + manifest + body;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "SPCK") r.fail("bad checkpoint magic");
  if (r.u32() != kCheckpointFormatVersion) r.fail("unsupported checkpoint version");
  const std::uint32_t count = r.u32();
  const std::uint64_t config_len = r.u64();
  Checkpoint ck;
  ck.config = std::string(r.take(config_len));
  std::vector<std::pair<std::string, std::uint64_t>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name(r.take(len));
    entries.emplace_back(std::move(name), r.u64());
  }
  for (auto& [name, offset] : entries) {
    r.seek(offset);
    ck.tensors.push_back({name, decode_tensor(r)});
  }
  return ck;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline void save_checkpoint(const std::string& path, const ParamList& tensors,
                            const std::string& config) {
  write_file_bytes(path, encode_checkpoint(tensors, config));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path), path);
}

/// Parses key=value lines; blank lines and '#' comments are ignored.
inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace segprompt
