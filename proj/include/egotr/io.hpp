// SPDX-License-Identifier: Apache-2.0
//
// File formats: a binary container for named float32 tensors with a
// key-value header (checkpoints, dataset caches), 8-bit PPM image export,
// and small text file helpers. All multi-byte fields are little-endian
// regardless of host byte order.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "egotr/kv.hpp"
#include "egotr/tensor.hpp"

namespace egotr {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string origin)
      : buf_(buf), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | std::uint8_t(buf_[pos_ + std::size_t(i)]);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | std::uint8_t(buf_[pos_ + std::size_t(i)]);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }
  void expect_done() const {
    if (!done()) throw DataError(origin_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size())
      throw DataError(origin_ + ": truncated at byte " +
                      std::to_string(pos_));
  }
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw DataError("short write: " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(f)),
                std::istreambuf_iterator<char>());
  return s;
}

// Named-tensor container: magic, key-value metadata, then tensors in file
// order as (name, rank, dims, float32 payload).
struct NamedBlobFile {
  static constexpr char kMagic[9] = "EGTRBLB1";

  KvList meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  std::string serialize() const {
    std::string out(kMagic, 8);
    detail::put_u32(out, std::uint32_t(meta.size()));
    for (const auto& [k, v] : meta) {
      detail::put_u32(out, std::uint32_t(k.size()));
      out += k;
      detail::put_u32(out, std::uint32_t(v.size()));
      out += v;
    }
    detail::put_u32(out, std::uint32_t(tensors.size()));
    for (const auto& [name, t] : tensors) {
      detail::put_u32(out, std::uint32_t(name.size()));
      out += name;
      detail::put_u32(out, std::uint32_t(t.rank()));
      for (std::size_t d : t.shape()) detail::put_u64(out, d);
      for (float v : t.data()) detail::put_f32(out, v);
    }
    return out;
  }

  void write(const std::filesystem::path& path) const {
    write_file_bytes(path, serialize());
  }

  static NamedBlobFile parse(const std::string& bytes,
                             const std::string& origin) {
    detail::ByteReader r(bytes, origin);
    if (r.bytes(8) != std::string(kMagic, 8))
      throw DataError(origin + ": bad magic");
    NamedBlobFile f;
    const std::uint32_t nkv = r.u32();
    for (std::uint32_t i = 0; i < nkv; ++i) {
      std::string k = r.bytes(r.u32());
      std::string v = r.bytes(r.u32());
      f.meta.emplace_back(std::move(k), std::move(v));
    }
    const std::uint32_t nt = r.u32();
    for (std::uint32_t i = 0; i < nt; ++i) {
      std::string name = r.bytes(r.u32());
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw DataError(origin + ": implausible rank");
      Shape shape(rank);
      for (auto& d : shape) d = r.u64();
      const std::size_t n = shape_numel(shape);
      std::vector<float> data(n);
      for (auto& v : data) v = r.f32();
      f.tensors.emplace_back(std::move(name),
                             Tensor<float>(std::move(shape), std::move(data)));
    }
    r.expect_done();
    return f;
  }

  static NamedBlobFile read(const std::filesystem::path& path) {
    return parse(read_file_bytes(path), path.string());
  }

  KvMap meta_map() const {
    KvMap m;
    for (const auto& [k, v] : meta) {
      if (!m.emplace(k, v).second)
        throw DataError("duplicate metadata key '" + k + "'");
    }
    return m;
  }
};

// 8-bit binary PPM export of a [3,H,W] tensor with values in [0,1];
// values outside the range are clamped. Lossy: inspection only.
inline void write_ppm(const std::filesystem::path& path,
                      const Tensor<float>& img) {
  check_dims(img.rank() == 3 && img.dim(0) == 3,
             "write_ppm: want [3,H,W], got " + shape_str(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  auto d = img.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        float v = d[(c * h + y) * w + x];
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        out.push_back(char(int(v * 255.0f + 0.5f)));
      }
  write_file_bytes(path, out);
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() &&
           (bytes[pos] == ' ' || bytes[pos] == '\n' || bytes[pos] == '\t' ||
            bytes[pos] == '\r'))
      ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      ++pos;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(std::uint8_t(bytes[pos])))
      ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw DataError(path.string() + ": not a P6 PPM");
  const std::size_t w = parse_u64(token());
  const std::size_t h = parse_u64(token());
  if (parse_u64(token()) != 255)
    throw DataError(path.string() + ": want 8-bit maxval");
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos != 3 * w * h)
    throw DataError(path.string() + ": payload size mismatch");
  Tensor<float> img({3, h, w});
  auto d = img.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        d[(c * h + y) * w + x] =
            float(std::uint8_t(bytes[pos + (y * w + x) * 3 + c])) / 255.0f;
  return img;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  write_file_bytes(path, text);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  return read_file_bytes(path);
}

}  // namespace egotr
