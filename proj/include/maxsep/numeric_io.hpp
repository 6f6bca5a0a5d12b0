#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "maxsep/errors.hpp"

namespace maxsep::detail {

/// Shortest decimal form that round-trips binary64 exactly.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Strict full-token parse; row/col are 0-based and reported 1-based.
inline double parse_double(const std::string& tok, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last)
    throw ParseError("matrix csv: row " + std::to_string(row + 1) + ", column " +
                     std::to_string(col + 1) + ": not a number: '" + tok + "'");
  return v;
}

}  // namespace maxsep::detail
