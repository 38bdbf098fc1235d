#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace aimfscil {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Error categories. The CLI maps each category onto an exit status.
enum class ErrorKind {
  usage,       // caller passed something the operation cannot accept
  validation,  // manifest / configuration content is inconsistent
  contract,    // shape or precondition violated
  numeric,     // non-finite value produced
  degeneracy,  // zero vector where a direction is required
  decode,      // image could not be decoded
  format,      // decoded data has the wrong layout (e.g. channel count)
  storage,     // filesystem write / read failure
  corruption,  // stored data failed its checksum
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::validation: return "validation";
    case ErrorKind::contract: return "contract";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::degeneracy: return "degeneracy";
    case ErrorKind::decode: return "decode";
    case ErrorKind::format: return "format";
    case ErrorKind::storage: return "storage";
    case ErrorKind::corruption: return "corruption";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  throw Error(kind, detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool condition, ErrorKind kind, Args&&... args) {
  if (!condition) fail(kind, std::forward<Args>(args)...);
}

// 64-bit FNV-1a; used for checksums, stub backbones and run ids.
class Fnv1a64 {
 public:
  static constexpr std::uint64_t offset_basis = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t prime = 0x100000001b3ULL;

  Fnv1a64& update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= prime;
    }
    return *this;
  }

  Fnv1a64& update(std::string_view text) { return update(text.data(), text.size()); }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  Fnv1a64& update_value(const T& value) {
    return update(&value, sizeof(T));
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = offset_basis;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string to_hex(std::uint64_t value) {
  std::ostringstream oss;
  oss << std::hex << std::setw(16) << std::setfill('0') << value;
  return oss.str();
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
std::uint64_t checksum(const Eigen::DenseBase<Derived>& m) {
  Fnv1a64 h;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) h.update_value(static_cast<Scalar>(m(i, j)));
  return h.digest();
}

}  // namespace aimfscil
