#pragma once

namespace isamp {

inline constexpr const char* kVersion = "0.1.0";

}
