#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsattn {

/// Dimension sizes of a dense tensor, row-major. Rank 0 denotes a scalar.
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& what) {
  throw std::runtime_error(what);
}

inline void check(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

/// Normalizes a possibly-negative axis index into [0, rank).
inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  long long a = axis;
  if (a < 0) a += static_cast<long long>(rank);
  check(a >= 0 && a < static_cast<long long>(rank),
        std::string(op) + ": axis " + std::to_string(axis) +
            " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

}  // namespace capsattn
