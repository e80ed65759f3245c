#pragma once

namespace qpanel {

inline constexpr const char* kVersion = "0.1.0";

} // namespace qpanel
