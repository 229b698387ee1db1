#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/tensor.hpp"

namespace nmod {

/// Trainable state plus optimizer state at a given step.
///
/// File layout, all integers little-endian:
///   "NMCK" u32 version  i64 seed
///   u32 n      n x entry        parameters, keyed "instance/weight"
///   u32 n_opt  n_opt x entry    optimizer state
///   u64 step
/// entry = u32 key_len, key bytes, u32 rank, rank x u64 dim, f32 data.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::int64_t seed = 0;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> optimizer;
  std::uint64_t step = 0;

  bool operator==(const Checkpoint& o) const {
    auto same = [](const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b) {
      if (a.size() != b.size()) return false;
      for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
        if (ia->first != ib->first || !ia->second.identical(ib->second)) return false;
      return true;
    };
    return version == o.version && seed == o.seed && step == o.step && same(params, o.params) &&
           same(optimizer, o.optimizer);
  }
};

using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view s) { out_.append(s); }
  template <class U>
  void le(U value) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    static_assert(sizeof(U) == sizeof(Bits));
    auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(Bits); ++i) out_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  void entry(const std::string& key, const Tensor& t) {
    le(static_cast<std::uint32_t>(key.size()));
    raw(key);
    le(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) le(static_cast<std::uint64_t>(d));
    for (float v : t.data()) le(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class U>
  U le() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(Bits));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(Bits); ++i)
      bits |= static_cast<Bits>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(Bits);
    return std::bit_cast<U>(bits);
  }
  std::pair<std::string, Tensor> entry() {
    auto key_len = le<std::uint32_t>();
    std::string key(raw(key_len));
    auto rank = le<std::uint32_t>();
    if (rank > 16) fail(Errc::IoError, what_ + ": implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      auto d = le<std::uint64_t>();
      shape.push_back(static_cast<std::int64_t>(d));
      n *= d;
    }
    if (n * 4 > remaining()) fail(Errc::IoError, what_ + ": truncated tensor '" + key + "'");
    std::vector<float> data(n);
    for (auto& v : data) v = le<float>();
    return {std::move(key), Tensor(std::move(shape), std::move(data))};
  }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail(Errc::IoError, what_ + ": unexpected end of data");
  }

  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::IoError, "failed writing '" + path.string() + "'");
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw("NMCK");
  w.le(c.version);
  w.le(c.seed);
  w.le(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [k, t] : c.params) w.entry(k, t);
  w.le(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& [k, t] : c.optimizer) w.entry(k, t);
  w.le(c.step);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.raw(4) != "NMCK") fail(Errc::IoError, "checkpoint: bad magic");
  Checkpoint c;
  c.version = r.le<std::uint32_t>();
  if (c.version != Checkpoint::kVersion) fail(Errc::IoError, "checkpoint: unsupported version " + std::to_string(c.version));
  c.seed = r.le<std::int64_t>();
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) c.params.insert(r.entry());
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) c.optimizer.insert(r.entry());
  c.step = r.le<std::uint64_t>();
  if (r.remaining() != 0) fail(Errc::IoError, "checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Tensor dump: "NMTD" u32 version, u32 n, n x entry (same entry layout as
/// checkpoints). Entry order is preserved.
inline std::string encode_dump(const TensorEntries& entries) {
  detail::ByteWriter w;
  w.raw("NMTD");
  w.le(std::uint32_t{1});
  w.le(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [k, t] : entries) w.entry(k, t);
  return w.take();
}

inline TensorEntries decode_dump(std::string_view bytes) {
  detail::ByteReader r(bytes, "tensor dump");
  if (r.raw(4) != "NMTD") fail(Errc::IoError, "tensor dump: bad magic");
  if (auto v = r.le<std::uint32_t>(); v != 1) fail(Errc::IoError, "tensor dump: unsupported version " + std::to_string(v));
  TensorEntries out;
  for (auto n = r.le<std::uint32_t>(); n > 0; --n) out.push_back(r.entry());
  if (r.remaining() != 0) fail(Errc::IoError, "tensor dump: trailing bytes");
  return out;
}

inline void save_dump(const TensorEntries& entries, const std::filesystem::path& path) {
  detail::write_file(path, encode_dump(entries));
}

inline TensorEntries load_dump(const std::filesystem::path& path) { return decode_dump(detail::read_file(path)); }

}  // namespace nmod
