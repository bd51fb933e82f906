#pragma once

namespace disagg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace disagg
