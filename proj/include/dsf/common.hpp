#pragma once

#include <sstream>
#include <string>

namespace dsf {
namespace detail {

// Builds an error message from heterogeneous parts.
template <typename... Args>
std::string str(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail
}  // namespace dsf
