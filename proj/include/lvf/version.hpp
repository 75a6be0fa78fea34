#pragma once

namespace lvf {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace lvf
