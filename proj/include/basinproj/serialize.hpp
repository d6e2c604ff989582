#pragma once

// Little-endian float blocks behind a one-line JSON header.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "basinproj/core.hpp"

namespace basinproj {

namespace detail {

inline void append_le_floats(std::string& out, std::span<const float> values) {
  static_assert(sizeof(float) == 4);
  for (const float v : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

inline std::vector<float> read_le_floats(std::span<const unsigned char> bytes, std::size_t offset, std::size_t n) {
  if (bytes.size() < offset || (bytes.size() - offset) / 4 < n) throw ParseError("truncated float block", bytes.size());
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[offset + 4 * i + b]) << (8 * b);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

/// Splits "<json>\n<payload>" and parses the header.
inline std::pair<nlohmann::json, std::size_t> read_json_header(std::span<const unsigned char> bytes) {
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<unsigned char>('\n'));
  if (nl == bytes.end()) throw ParseError("missing header line", bytes.size());
  const std::string text(bytes.begin(), nl);
  try {
    return {nlohmann::json::parse(text), static_cast<std::size_t>(nl - bytes.begin()) + 1};
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("bad header: ") + e.what(), e.byte);
  }
}

}  // namespace detail

}  // namespace basinproj
