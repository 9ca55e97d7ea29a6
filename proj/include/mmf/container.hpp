#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mmf/error.hpp"
#include "mmf/tensor.hpp"

namespace mmf {

// Binary named-tensor container shared by checkpoints, cohorts and record
// files. Layout (all integers little-endian):
//   "MFCK1" | u16 version | u32 count
//   count x { u16 name_len | name | u8 dtype (1 = f64) | u8 rank | rank x u64 dim | payload }
//   u32 json_len | json
struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  std::vector<NamedTensor> entries;
  std::string json;
};

inline constexpr char kContainerMagic[5] = {'M', 'F', 'C', 'K', '1'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

namespace container_detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw TruncatedError("'" + path_ + "' ends inside " + what + " at byte " + std::to_string(pos_));
    }
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace container_detail

inline std::string encode_container(const Container& c) {
  using container_detail::put_le;
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const NamedTensor& e : c.entries) {
    if (e.name.size() > 0xffff) throw DataError("tensor name longer than 65535 bytes");
    if (e.value.rank() > 0xff) throw DataError("tensor '" + e.name + "' has rank above 255");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put_le<std::uint8_t>(out, kDtypeF64);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) put_le<std::uint64_t>(out, d);
    for (double v : e.value.data()) container_detail::put_f64(out, v);
  }
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.json.size()));
  out += c.json;
  return out;
}

inline Container decode_container(const std::string& bytes, const std::string& path = "<memory>") {
  container_detail::Cursor in(bytes, path);
  if (in.bytes(sizeof(kContainerMagic), "the magic") != std::string(kContainerMagic, sizeof(kContainerMagic))) {
    throw BadMagicError("'" + path + "' does not start with MFCK1");
  }
  const auto version = in.le<std::uint16_t>("the version");
  if (version != kContainerVersion) {
    throw VersionMismatchError("'" + path + "' has format version " + std::to_string(version) + ", expected " +
                               std::to_string(kContainerVersion));
  }
  const auto count = in.le<std::uint32_t>("the entry count");
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = in.bytes(in.le<std::uint16_t>("an entry name length"), "an entry name");
    const auto dtype = in.le<std::uint8_t>("an entry dtype");
    if (dtype != kDtypeF64) throw DataError("'" + path + "' entry '" + e.name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = in.le<std::uint8_t>("an entry rank");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = in.le<std::uint64_t>("an entry shape");
      n *= d;
    }
    if (n > in.remaining() / 8) throw TruncatedError("'" + path + "' ends inside the payload of '" + e.name + "'");
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(in.le<std::uint64_t>("a payload"));
    e.value = rank == 0 ? Tensor() : Tensor(std::move(shape), std::move(data));
    c.entries.push_back(std::move(e));
  }
  c.json = in.bytes(in.le<std::uint32_t>("the config length"), "the config blob");
  return c;
}

// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(target.parent_path(), ec);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_container(const std::string& path, const Container& c) { write_file_atomic(path, encode_container(c)); }
inline Container read_container(const std::string& path) { return decode_container(read_file(path), path); }

}  // namespace mmf
