#pragma once

#include <cstdio>
#include <string>

namespace algm {

// CSV/JSON-facing float text: 9 significant digits.
inline std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace algm
