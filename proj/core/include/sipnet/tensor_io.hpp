#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sipnet/errors.hpp"
#include "sipnet/tensor.hpp"

// SFMT tensor container, little-endian throughout:
//
//   bytes 0..3   magic "SFMT"
//   bytes 4..7   format version, u32 (currently 1)
//   bytes 8..11  rank, u32 (>= 1)
//   then         rank dims, u64 each
//   then         scalar type code, u32 (1 = float32, 2 = float64)
//   then         size(shape) scalars, row-major
namespace sipnet {

inline constexpr std::uint32_t kSfmtVersion = 1;
inline constexpr std::uint32_t kScalarF32 = 1;
inline constexpr std::uint32_t kScalarF64 = 2;
inline constexpr std::uint32_t kSfmtMaxRank = 32;

template <typename S>
constexpr std::uint32_t scalar_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "unsupported scalar type");
  return std::is_same_v<S, float> ? kScalarF32 : kScalarF64;
}

inline const char* scalar_name(std::uint32_t code) {
  switch (code) {
    case kScalarF32: return "float32";
    case kScalarF64: return "float64";
    default: return "unknown";
  }
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& path, std::ifstream&& in) : path_(path), in_(std::move(in)) {}

  std::uint64_t offset() const { return offset_; }

  void read_exact(char* dst, std::uint64_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::uint64_t>(in_.gcount());
    if (got != n) {
      throw DataError(path_ + ": truncated while reading " + std::string(what) +
                      " at byte offset " + std::to_string(offset_) + " (expected " +
                      std::to_string(n) + " bytes, got " + std::to_string(got) + ")");
    }
    offset_ += n;
  }

  std::uint32_t read_u32(const char* what) {
    unsigned char b[4];
    read_exact(reinterpret_cast<char*>(b), 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::uint64_t read_u64(const char* what) {
    unsigned char b[8];
    read_exact(reinterpret_cast<char*>(b), 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

template <typename S>
void append_scalars(std::string& buf, const S* data, std::int64_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    buf.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(n) * sizeof(S));
  } else {
    using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
    for (std::int64_t i = 0; i < n; ++i) {
      const U u = std::bit_cast<U>(data[i]);
      for (std::size_t b = 0; b < sizeof(S); ++b) {
        buf.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
      }
    }
  }
}

template <typename S>
void read_scalars(ByteReader& r, S* data, std::int64_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    r.read_exact(reinterpret_cast<char*>(data), static_cast<std::uint64_t>(n) * sizeof(S),
                 "tensor payload");
  } else {
    using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
    std::vector<char> raw(static_cast<std::size_t>(n) * sizeof(S));
    r.read_exact(raw.data(), raw.size(), "tensor payload");
    for (std::int64_t i = 0; i < n; ++i) {
      U u = 0;
      for (int b = static_cast<int>(sizeof(S)) - 1; b >= 0; --b) {
        u = (u << 8) | static_cast<unsigned char>(raw[static_cast<std::size_t>(i) * sizeof(S) +
                                                      static_cast<std::size_t>(b)]);
      }
      data[i] = std::bit_cast<S>(u);
    }
  }
}

}  // namespace detail

template <typename S>
void write_tensor(const std::string& path, const Tensor<S>& t) {
  if (t.rank() < 1) throw DataError("refusing to write rank-0 tensor to " + path);
  std::string buf;
  buf.reserve(24 + static_cast<std::size_t>(t.size()) * sizeof(S));
  buf.append("SFMT", 4);
  detail::put_u32(buf, kSfmtVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u64(buf, static_cast<std::uint64_t>(d));
  detail::put_u32(buf, scalar_code<S>());
  detail::append_scalars(buf, t.data(), t.size());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for " + path);
}

struct SfmtInfo {
  Shape shape;
  std::uint32_t scalar = 0;
  std::uint64_t payload_offset = 0;
};

namespace detail {

inline SfmtInfo read_sfmt_header(ByteReader& r) {
  char magic[4];
  r.read_exact(magic, 4, "magic");
  if (std::memcmp(magic, "SFMT", 4) != 0) {
    throw DataError(r.path() + ": bad magic at byte offset 0 (not an SFMT file)");
  }
  const auto version = r.read_u32("version");
  if (version != kSfmtVersion) {
    throw DataError(r.path() + ": unsupported SFMT version " + std::to_string(version) +
                    " at byte offset 4");
  }
  const auto rank = r.read_u32("rank");
  if (rank == 0) throw DataError(r.path() + ": rank 0 tensor rejected at byte offset 8");
  if (rank > kSfmtMaxRank) {
    throw DataError(r.path() + ": implausible rank " + std::to_string(rank) +
                    " at byte offset 8");
  }
  SfmtInfo info;
  info.shape.reserve(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = r.read_u64("dims");
    if (d == 0 || d > (1ull << 48)) {
      throw DataError(r.path() + ": invalid dimension " + std::to_string(d) +
                      " at byte offset " + std::to_string(r.offset() - 8));
    }
    info.shape.push_back(static_cast<std::int64_t>(d));
  }
  info.scalar = r.read_u32("scalar type");
  if (info.scalar != kScalarF32 && info.scalar != kScalarF64) {
    throw DataError(r.path() + ": unknown scalar type code " + std::to_string(info.scalar) +
                    " at byte offset " + std::to_string(r.offset() - 4));
  }
  info.payload_offset = r.offset();
  return info;
}

}  // namespace detail

// Header-only inspection (shape and scalar type) without loading the payload.
inline SfmtInfo sfmt_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  detail::ByteReader r(path, std::move(in));
  return detail::read_sfmt_header(r);
}

template <typename S>
Tensor<S> read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  detail::ByteReader r(path, std::move(in));
  const auto info = detail::read_sfmt_header(r);
  if (info.scalar != scalar_code<S>()) {
    throw DataError(path + ": scalar type is " + scalar_name(info.scalar) + ", requested " +
                    scalar_name(scalar_code<S>()));
  }
  const auto n = shape_numel(info.shape);
  std::vector<S> data(static_cast<std::size_t>(n));
  detail::read_scalars(r, data.data(), n);
  if (!r.at_eof()) {
    throw DataError(path + ": trailing bytes after tensor payload at byte offset " +
                    std::to_string(r.offset()));
  }
  return Tensor<S>(info.shape, std::move(data));
}

}  // namespace sipnet
