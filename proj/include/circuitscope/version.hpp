#pragma once

namespace circuitscope {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace circuitscope
