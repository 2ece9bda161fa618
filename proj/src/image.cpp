#include "bowda/image.hpp"

#include <algorithm>
#include <sstream>

namespace bowda {

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << d.depth << "x" << d.height << "x" << d.width;
  return os.str();
}

std::string to_string(const Spacing& s) {
  std::ostringstream os;
  os << "(" << s.depth << ", " << s.height << ", " << s.width << ")";
  return os.str();
}

Mask::Mask(Dims dims, Spacing spacing, std::vector<std::uint8_t> values)
    : Image(dims, spacing, std::move(values)) {
  for (auto v : this->values()) {
    if (v > 1) throw std::invalid_argument("Mask: values must be 0 or 1");
  }
}

std::size_t Mask::foreground_count() const {
  return static_cast<std::size_t>(std::count(values().begin(), values().end(), std::uint8_t{1}));
}

}  // namespace bowda
