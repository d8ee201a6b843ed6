// SPDX-License-Identifier: Apache-2.0
#include "csdlab/rng.hpp"

#include <sstream>

#include "csdlab/error.hpp"

namespace csdlab {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_token: return "invalid token";
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::length_mismatch: return "length mismatch";
    case ErrorKind::shape_mismatch: return "shape mismatch";
    case ErrorKind::schedule: return "schedule error";
    case ErrorKind::boundary: return "boundary error";
    case ErrorKind::degenerate: return "degenerate distribution";
    case ErrorKind::position: return "position error";
    case ErrorKind::too_large: return "too large";
    case ErrorKind::gradient: return "gradient error";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::config: return "config error";
    case ErrorKind::missing_artifact: return "missing artifact";
    case ErrorKind::io: return "io error";
  }
  return "error";
}

int Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw Error(ErrorKind::degenerate, "categorical draw from zero mass");
  double u = uniform() * total;
  int last_positive = -1;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] <= 0.0) continue;
    last_positive = static_cast<int>(j);
    if (u < weights[j]) return last_positive;
    u -= weights[j];
  }
  // Rounding can leave u marginally above the accumulated mass.
  return last_positive;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_;
  if (!is) throw Error(ErrorKind::io, "malformed rng state");
  unit_.reset();
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace csdlab
