// Little-endian POD read/write helpers for the on-disk formats.
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "sbc/core.hpp"

namespace sbc::binio {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts need byte swapping");

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read(std::istream& is) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw StorageError("unexpected end of stream");
  }
  return value;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  if (!is.read(got, 4) || std::string(got, 4) != std::string(magic, 4)) {
    throw StorageError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace sbc::binio
