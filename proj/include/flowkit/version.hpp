#pragma once

namespace flowkit {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace flowkit
