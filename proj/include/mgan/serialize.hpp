#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgan/tensor.hpp"

namespace mgan {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kParamSetVersion = 1;

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::uint64_t le(int n, const char* field) {
    need(std::size_t(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }
  std::uint64_t be(int n, const char* field) {
    need(std::size_t(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | bytes_[pos_ + i];
    pos_ += std::size_t(n);
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* field) {
    need(n, field);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(what_ + ": truncated while reading " + field);
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

/// "FLPS" | version u32 | { name_len u16 | name | rank u8 | dims u32... | f32 data }*
/// All integers and floats little-endian.
inline std::vector<std::uint8_t> encode_params(const ParamSet& params) {
  std::vector<std::uint8_t> out = {'F', 'L', 'P', 'S'};
  detail::put_le(out, kParamSetVersion, 4);
  for (const auto& [name, t] : params) {
    if (name.size() > 0xFFFF) throw FormatError("parameter name too long");
    if (t.rank() > 0xFF) throw FormatError("tensor rank too large");
    detail::put_le(out, name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(std::uint8_t(t.rank()));
    for (auto d : t.shape()) detail::put_le(out, d, 4);
    for (float v : t.storage()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_le(out, bits, 4);
    }
  }
  return out;
}

inline ParamSet decode_params(const std::vector<std::uint8_t>& bytes,
                              const std::string& what = "paramset") {
  detail::ByteReader r(bytes, what);
  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, "FLPS", 4) != 0) throw FormatError(what + ": bad magic (expected FLPS)");
  const auto version = r.le(4, "version");
  if (version != kParamSetVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  ParamSet out;
  while (!r.done()) {
    const auto len = std::size_t(r.le(2, "name length"));
    const auto* name_bytes = r.take(len, "name");
    std::string name(reinterpret_cast<const char*>(name_bytes), len);
    const auto rank = std::size_t(r.le(1, "rank"));
    Shape shape(rank);
    for (auto& d : shape) d = std::size_t(r.le(4, "dims"));
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) {
      const auto bits = std::uint32_t(r.le(4, "data"));
      std::memcpy(&v, &bits, 4);
    }
    if (out.contains(name)) throw FormatError(what + ": duplicate tensor '" + name + "'");
    out.set(name, Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline void save_params(const std::string& path, const ParamSet& params) {
  write_file_bytes(path, encode_params(params));
}

inline ParamSet load_params(const std::string& path) {
  return decode_params(read_file_bytes(path), path);
}

}  // namespace mgan
