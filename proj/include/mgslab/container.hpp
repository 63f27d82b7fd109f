#pragma once

// Binary container for tensors plus JSON metadata. Layout (little-endian):
//   u32 magic 'MGSL', u32 version, u32 tensor count,
//   per tensor: u32 name length, name bytes, u32 ndim, u64 dims[ndim], f64 data[prod(dims)],
//   u64 metadata length, metadata (UTF-8 JSON).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mgslab/error.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::uint32_t kContainerMagic = 0x4C53474D;  // "MGSL" on disk
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("container has no tensor named '" + name + "'");
  }
};

namespace detail {

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary | std::ios::ate) {
    if (!in_) throw FormatError("cannot open '" + path + "'");
    size_ = static_cast<std::size_t>(in_.tellg());
    in_.seekg(0);
  }

  /// Fails before allocating when a header claims more bytes than the file holds.
  void expect(std::size_t n, const char* what) {
    const auto pos = static_cast<std::size_t>(in_.tellg());
    if (n > size_ - pos) {
      throw FormatError("'" + path_ + "' truncated while reading " + what + ": expected " + std::to_string(n) +
                        " bytes, got " + std::to_string(size_ - pos));
    }
  }

  template <typename T>
  T get(const char* what) {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }

  void read(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("'" + path_ + "' truncated while reading " + what + ": expected " + std::to_string(n) +
                        " bytes, got " + std::to_string(in_.gcount()));
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t size_ = 0;
};

}  // namespace detail

inline void save_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  detail::put(out, kContainerMagic);
  detail::put(out, kContainerVersion);
  detail::put(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    detail::put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  const std::string meta = c.metadata.dump();
  detail::put(out, static_cast<std::uint64_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  if (!out) throw FormatError("write to '" + path + "' failed");
}

inline Container load_container(const std::string& path) {
  detail::Reader in(path);
  if (in.get<std::uint32_t>("magic") != kContainerMagic) throw FormatError("'" + path + "' is not an MGSL container");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError("'" + path + "' has container version " + std::to_string(version) + ", expected " +
                      std::to_string(kContainerVersion));
  }
  Container c;
  const auto count = in.get<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.get<std::uint32_t>("name length");
    in.expect(name_len, "tensor name");
    std::string name(name_len, '\0');
    in.read(name.data(), name.size(), "tensor name");
    const auto rank = in.get<std::uint32_t>("rank");
    in.expect(std::size_t{rank} * sizeof(std::uint64_t), "dimensions");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>("dimension"));
    std::size_t count_values = 1;
    for (auto d : shape) {
      if (d != 0 && count_values > (std::size_t{1} << 60) / d) throw FormatError("'" + path + "' has an absurd tensor shape");
      count_values *= d;
    }
    in.expect(count_values * sizeof(double), "tensor payload");
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data().data()), t.size() * sizeof(double), "tensor payload");
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto meta_len = static_cast<std::size_t>(in.get<std::uint64_t>("metadata length"));
  in.expect(meta_len, "metadata");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta.size(), "metadata");
  try {
    c.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' has malformed metadata: " + e.what());
  }
  return c;
}

}  // namespace mgslab
