#include "bowda/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace bowda {

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  std::mt19937_64 e;
  is >> e;
  if (!is) throw std::invalid_argument("Rng: malformed engine state");
  engine_ = e;
}

}  // namespace bowda
