#include "empower/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace empower {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng Rng::stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  Rng rng(mix64(seed + kGolden));
  for (auto id : path) {
    rng = rng.split(id);
  }
  return rng;
}

Rng::result_type Rng::operator()() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) {
      throw std::invalid_argument("categorical: negative or NaN weight");
    }
    total += w;
  }
  if (!(total > 0.0)) {
    throw std::invalid_argument("categorical: weights sum to zero");
  }
  const double r = uniform() * total;
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) {
      continue;
    }
    acc += weights[i];
    last = i;
    if (r < acc) {
      return i;
    }
  }
  return last;
}

Rng Rng::split(std::uint64_t id) const {
  return Rng(mix64(key_ ^ mix64(id + kGolden)));
}

}  // namespace empower
