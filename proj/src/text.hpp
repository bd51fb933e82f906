#pragma once

#include <array>
#include <charconv>
#include <string>

namespace disagg::detail {

// Shortest text that round-trips at 17 significant digits.
inline std::string fmt_double(double v) {
  std::array<char, 40> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                 std::chars_format::general, 17);
  return {buf.data(), ptr};
}

}  // namespace disagg::detail
