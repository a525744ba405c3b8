#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include <json.hpp>

namespace gistlab {

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

/// Fingerprint of a JSON value: FNV-1a 64 of its compact dump (object keys
/// are sorted by the library, so field order does not matter).
inline std::string json_fingerprint(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

}  // namespace gistlab
