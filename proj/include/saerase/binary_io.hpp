#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <type_traits>

namespace saerase::binary {

// Little-endian encode/decode of fixed-width scalars, independent of host order.

template <typename T>
  requires std::is_trivially_copyable_v<T>
std::array<char, sizeof(T)> to_le(T value) {
  std::array<char, sizeof(T)> out;
  std::memcpy(out.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(out[i], out[sizeof(T) - 1 - i]);
  }
  return out;
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T from_le(const char* bytes) {
  std::array<char, sizeof(T)> tmp;
  std::memcpy(tmp.data(), bytes, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(tmp[i], tmp[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, tmp.data(), sizeof(T));
  return value;
}

template <typename T>
void write(std::ostream& os, T value) {
  const auto bytes = to_le(value);
  os.write(bytes.data(), bytes.size());
}

/// Returns false on short read.
template <typename T>
bool read(std::istream& is, T& value) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), bytes.size())) return false;
  value = from_le<T>(bytes.data());
  return true;
}

inline void write_f32(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const float v : values) write(os, v);
  }
}

/// Returns the number of complete floats read.
inline std::size_t read_f32(std::istream& is, std::span<float> values) {
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  const auto got = static_cast<std::size_t>(is.gcount()) / sizeof(float);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < got; ++i) {
      values[i] = from_le<float>(reinterpret_cast<const char*>(&values[i]));
    }
  }
  return got;
}

}  // namespace saerase::binary
