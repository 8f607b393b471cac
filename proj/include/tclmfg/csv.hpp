#pragma once

#include <cstdio>
#include <initializer_list>
#include <ostream>
#include <string>

namespace tclmfg::csv {

/// Shortest-safe round-trip text for a double: 17 significant digits, '.'
/// as decimal separator regardless of locale.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void row(std::ostream& os, std::initializer_list<double> values) {
  bool first = true;
  for (double v : values) {
    if (!first) os << ',';
    os << fmt(v);
    first = false;
  }
  os << '\n';
}

}  // namespace tclmfg::csv
