#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff::io {

// File layout, all integers little-endian:
//
//   "MSTD" | u32 version | u64 config_hash | u32 entry_count
//   entry: u32 name_len | name | u32 dtype | u32 rank | u64 dims[rank] | u64 nbytes | blob
//   u64 FNV-1a of every preceding byte

inline constexpr char kMagic[4] = {'M', 'S', 'T', 'D'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint32_t { F64 = 0, F32 = 1, I64 = 2, Bytes = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F64:
    case DType::I64:
      return 8;
    case DType::F32:
      return 4;
    case DType::Bytes:
      return 1;
  }
  return 0;
}

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::F64:
      return "f64";
    case DType::F32:
      return "f32";
    case DType::I64:
      return "i64";
    case DType::Bytes:
      return "bytes";
  }
  return "?";
}

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class F>
auto bits_of(F x) {
  if constexpr (sizeof(F) == 8)
    return std::bit_cast<std::uint64_t>(x);
  else
    return std::bit_cast<std::uint32_t>(x);
}

}  // namespace detail

struct Entry {
  std::string name;
  DType dtype = DType::F64;
  Shape shape;
  std::vector<unsigned char> blob;  // little-endian elements
};

/// Named tensors plus the hash of the configuration that produced them.
class Bundle {
 public:
  std::uint64_t config_hash = 0;

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("checkpoint has no tensor '" + name + "'");
    return entries_[it->second];
  }

  template <class F>
  void put(const std::string& name, const Tensor<F>& t) {
    static_assert(std::is_same_v<F, double> || std::is_same_v<F, float>);
    Entry e{name, std::is_same_v<F, double> ? DType::F64 : DType::F32, t.shape(), {}};
    e.blob.reserve(t.size() * sizeof(F));
    for (F v : t.data()) detail::put_le(e.blob, detail::bits_of(v));
    insert(std::move(e));
  }

  void put_indices(const std::string& name, const std::vector<std::size_t>& v, Shape shape) {
    if (shape_size(shape) != v.size()) throw ShapeError("put_indices: '" + name + "' size does not match shape");
    Entry e{name, DType::I64, std::move(shape), {}};
    for (auto x : v) detail::put_le(e.blob, static_cast<std::uint64_t>(x));
    insert(std::move(e));
  }

  void put_ints(const std::string& name, const std::vector<int>& v) {
    Entry e{name, DType::I64, {v.size()}, {}};
    for (auto x : v) detail::put_le(e.blob, static_cast<std::uint64_t>(static_cast<std::int64_t>(x)));
    insert(std::move(e));
  }

  void put_text(const std::string& name, const std::string& s) {
    Entry e{name, DType::Bytes, {s.size()}, std::vector<unsigned char>(s.begin(), s.end())};
    insert(std::move(e));
  }

  template <class F>
  Tensor<F> get(const std::string& name) const {
    const auto& e = entry(name);
    const DType want = std::is_same_v<F, double> ? DType::F64 : DType::F32;
    if (e.dtype != want) {
      throw LoadError("tensor '" + name + "': stored as " + dtype_name(e.dtype) + ", requested " + dtype_name(want));
    }
    Tensor<F> t(e.shape);
    using Bits = decltype(detail::bits_of(F{}));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<F>(detail::get_le<Bits>(&e.blob[i * sizeof(F)]));
    return t;
  }

  std::vector<std::size_t> get_indices(const std::string& name) const {
    const auto& e = require(name, DType::I64);
    std::vector<std::size_t> v(shape_size(e.shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::size_t>(detail::get_le<std::uint64_t>(&e.blob[i * 8]));
    return v;
  }

  std::vector<int> get_ints(const std::string& name) const {
    const auto& e = require(name, DType::I64);
    std::vector<int> v(shape_size(e.shape));
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<int>(static_cast<std::int64_t>(detail::get_le<std::uint64_t>(&e.blob[i * 8])));
    return v;
  }

  std::string get_text(const std::string& name) const {
    const auto& e = require(name, DType::Bytes);
    return std::string(e.blob.begin(), e.blob.end());
  }

  /// Stores every parameter as `prefix + name`.
  template <class F>
  void put_params(const std::string& prefix, const ParamSet<F>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) put(prefix + p.name(i), p[i]);
  }

  /// Overwrites the parameters of an initialised set; each stored tensor
  /// must exist and match the expected shape.
  template <class F>
  void get_params(const std::string& prefix, ParamSet<F>& p) const {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string name = prefix + p.name(i);
      const auto& e = entry(name);
      if (e.shape != p[i].shape()) {
        throw LoadError("tensor '" + name + "': stored shape " + shape_string(e.shape) + ", expected " +
                        shape_string(p[i].shape()));
      }
      p[i] = get<F>(name);
    }
  }

  std::vector<unsigned char> serialize() const {
    std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
    detail::put_le(out, kFormatVersion);
    detail::put_le(out, config_hash);
    detail::put_le(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      detail::put_le(out, static_cast<std::uint32_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      detail::put_le(out, static_cast<std::uint32_t>(e.dtype));
      detail::put_le(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) detail::put_le(out, static_cast<std::uint64_t>(d));
      detail::put_le(out, static_cast<std::uint64_t>(e.blob.size()));
      out.insert(out.end(), e.blob.begin(), e.blob.end());
    }
    detail::put_le(out, fnv1a(out.data(), out.size()));
    return out;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
  }

 private:
  void insert(Entry e) {
    if (index_.count(e.name)) throw ContractError("checkpoint: duplicate tensor '" + e.name + "'");
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  const Entry& require(const std::string& name, DType t) const {
    const auto& e = entry(name);
    if (e.dtype != t) throw LoadError("tensor '" + name + "': stored as " + dtype_name(e.dtype) + ", requested " + dtype_name(t));
    return e;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;

  friend Bundle parse(const std::vector<unsigned char>&, const std::string&);
};

/// Parses a serialized bundle. Checks run in order: magic, version, entry
/// headers (each failure names its tensor), then the trailing checksum.
inline Bundle parse(const std::vector<unsigned char>& bytes, const std::string& what = "checkpoint") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const std::string& ctx) {
    if (bytes.size() < 8 || pos + n > bytes.size() - 8) throw LoadError(what + ": truncated " + ctx);
  };
  need(4, "header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw LoadError(what + ": not a checkpoint (bad magic bytes)");
  pos = 4;
  need(16, "header");
  const auto version = detail::get_le<std::uint32_t>(&bytes[pos]);
  if (version != kFormatVersion) {
    throw LoadError(what + ": format version " + std::to_string(version) + ", this build reads version " +
                    std::to_string(kFormatVersion));
  }
  Bundle b;
  b.config_hash = detail::get_le<std::uint64_t>(&bytes[pos + 4]);
  const auto count = detail::get_le<std::uint32_t>(&bytes[pos + 12]);
  pos += 16;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string ord = "entry " + std::to_string(i);
    need(4, ord);
    const auto name_len = detail::get_le<std::uint32_t>(&bytes[pos]);
    pos += 4;
    need(name_len, ord + " name");
    Entry e;
    e.name.assign(reinterpret_cast<const char*>(&bytes[pos]), name_len);
    pos += name_len;
    const std::string tag = "tensor '" + e.name + "'";
    need(8, tag + " header");
    const auto dtype = detail::get_le<std::uint32_t>(&bytes[pos]);
    const auto rank = detail::get_le<std::uint32_t>(&bytes[pos + 4]);
    pos += 8;
    if (dtype > static_cast<std::uint32_t>(DType::Bytes)) throw LoadError(what + ": " + tag + " has unknown dtype " + std::to_string(dtype));
    if (rank < 1 || rank > 8) throw LoadError(what + ": " + tag + " has invalid rank " + std::to_string(rank));
    e.dtype = static_cast<DType>(dtype);
    need(8ull * rank + 8, tag + " shape header");
    std::uint64_t elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = detail::get_le<std::uint64_t>(&bytes[pos]);
      pos += 8;
      if (d == 0 || d > (1ull << 40)) throw LoadError(what + ": " + tag + " has invalid dimension " + std::to_string(d));
      e.shape.push_back(static_cast<std::size_t>(d));
      elems *= d;
    }
    const auto nbytes = detail::get_le<std::uint64_t>(&bytes[pos]);
    pos += 8;
    if (elems * dtype_size(e.dtype) != nbytes) {
      throw LoadError(what + ": " + tag + " shape header " + shape_string(e.shape) + " does not match its " +
                      std::to_string(nbytes) + "-byte blob");
    }
    need(nbytes, tag + " data");
    e.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + nbytes));
    pos += nbytes;
    if (b.has(e.name)) throw LoadError(what + ": duplicate " + tag);
    b.insert(std::move(e));
  }
  if (pos + 8 != bytes.size()) throw LoadError(what + ": " + std::to_string(bytes.size() - pos - 8) + " unexpected trailing bytes");
  const auto stored = detail::get_le<std::uint64_t>(&bytes[pos]);
  if (stored != fnv1a(bytes.data(), pos)) throw LoadError(what + ": checksum mismatch (file is corrupt)");
  return b;
}

struct LoadResult {
  Bundle bundle;
  std::vector<std::string> warnings;
};

/// Reads a bundle. A differing config hash is reported as a warning only;
/// callers check shapes when they restore parameters.
inline LoadResult load(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = std::nullopt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  LoadResult r{parse(bytes, path.string()), {}};
  if (expected_hash && *expected_hash != r.bundle.config_hash) {
    r.warnings.push_back(path.string() + ": written under a different configuration (hash mismatch)");
  }
  return r;
}

}  // namespace mstdiff::io
