#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "savae/error.hpp"
#include "savae/tensor.hpp"

namespace savae {

/// Ordered collection of named parameter tensors (one network's weights, or
/// a gradient with the same layout).
class ModelParams {
 public:
  ModelParams() = default;

  void add(const std::string& name, Tensor value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  Tensor& at(const std::string& name) { return entries_[lookup(name)].second; }
  const Tensor& at(const std::string& name) const { return entries_[lookup(name)].second; }

  std::size_t count() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor& value(std::size_t i) { return entries_[i].second; }
  const Tensor& value(std::size_t i) const { return entries_[i].second; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_dim() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(total_dim()));
    Eigen::Index off = 0;
    for (const auto& [_, t] : entries_) {
      out.segment(off, static_cast<Eigen::Index>(t.size())) = t.vec();
      off += static_cast<Eigen::Index>(t.size());
    }
    return out;
  }

  /// Inverse of flatten(): same names and shapes as *this, values from `flat`.
  ModelParams unflatten(const Vector& flat) const {
    if (static_cast<std::size_t>(flat.size()) != total_dim())
      throw ShapeError("ModelParams::unflatten: got " + std::to_string(flat.size()) +
                       " values for " + std::to_string(total_dim()));
    ModelParams out;
    Eigen::Index off = 0;
    for (const auto& [n, t] : entries_) {
      Tensor v(t.shape());
      v.vec() = flat.segment(off, static_cast<Eigen::Index>(t.size()));
      off += static_cast<Eigen::Index>(t.size());
      out.add(n, std::move(v));
    }
    return out;
  }

  ModelParams zeros_like() const {
    ModelParams out;
    for (const auto& [n, t] : entries_) out.add(n, Tensor(t.shape()));
    return out;
  }

  bool same_layout(const ModelParams& other) const {
    if (count() != other.count()) return false;
    for (std::size_t i = 0; i < count(); ++i)
      if (name(i) != other.name(i) || value(i).shape() != other.value(i).shape()) return false;
    return true;
  }

  /// this += a * other (layouts must match).
  void axpy(double a, const ModelParams& other) {
    require_layout(other, "axpy");
    for (std::size_t i = 0; i < count(); ++i) value(i).vec() += a * other.value(i).vec();
  }

  void scale(double a) {
    for (auto& [_, t] : entries_) t.vec() *= a;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [_, t] : entries_) s += t.vec().squaredNorm();
    return s;
  }

  /// Entries whose name starts with `prefix`, prefix stripped.
  ModelParams with_prefix_removed(const std::string& prefix) const {
    ModelParams out;
    for (const auto& [n, t] : entries_)
      if (n.starts_with(prefix)) out.add(n.substr(prefix.size()), t);
    return out;
  }

  void merge_prefixed(const std::string& prefix, const ModelParams& other) {
    for (const auto& [n, t] : other) add(prefix + n, t);
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  void require_layout(const ModelParams& other, const char* op) const {
    if (!same_layout(other)) throw ShapeError(std::string("ModelParams::") + op + ": layout mismatch");
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Checkpoint file: magic "SAVAECK1", u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, u64 extents, little-endian f64 values.
namespace checkpoint {

inline constexpr char kMagic[8] = {'S', 'A', 'V', 'A', 'E', 'C', 'K', '1'};

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}
template <class T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw IoError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}
}  // namespace detail

inline void write(std::ostream& os, const ModelParams& params) {
  os.write(kMagic, sizeof kMagic);
  detail::put<std::uint64_t>(os, params.count());
  for (const auto& [name, t] : params) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
    for (double v : t.values()) detail::put<double>(os, v);
  }
}

inline ModelParams read(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw IoError("checkpoint: bad magic");
  auto n = detail::get<std::uint64_t>(is);
  ModelParams out;
  for (std::uint64_t i = 0; i < n; ++i) {
    auto len = detail::get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint: truncated name");
    auto rank = detail::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get<std::uint64_t>(is);
    Tensor t(shape);
    for (auto& v : t.values()) v = detail::get<double>(is);
    out.add(name, std::move(t));
  }
  return out;
}

inline void save(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  write(os, params);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

inline ModelParams load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  try {
    return read(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace checkpoint
}  // namespace savae
