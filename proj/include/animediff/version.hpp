#pragma once

namespace animediff {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace animediff
