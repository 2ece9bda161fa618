#include "bowda/tensor.hpp"

namespace bowda {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.d) + ", " +
         std::to_string(s.h) + ", " + std::to_string(s.w) + ")";
}

}  // namespace bowda
