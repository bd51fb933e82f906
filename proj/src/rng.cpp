#include "disagg/rng.hpp"

#include <cmath>
#include <numbers>

#include "disagg/error.hpp"

namespace disagg {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() noexcept {
  ++counter_;
  return splitmix64(seed_ + counter_ * kGolden);
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) noexcept {
  // Lemire-style rejection on the high bits keeps the result unbiased.
  const std::uint64_t limit = (~std::uint64_t{0} - n + 1) % n;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x >= limit) return x % n;
  }
}

double RngStream::normal() noexcept {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::poisson(double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) {
    throw ValidationError("poisson mean must be finite and non-negative");
  }
  // Sum of independent Poisson draws is Poisson; chunking keeps Knuth's
  // product method away from exp underflow.
  constexpr double kChunk = 16.0;
  std::uint64_t total = 0;
  double remaining = mean;
  while (remaining > 0.0) {
    const double lambda = remaining > kChunk ? kChunk : remaining;
    remaining -= lambda;
    const double threshold = std::exp(-lambda);
    double product = uniform();
    while (product > threshold) {
      ++total;
      product *= uniform();
    }
  }
  return total;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(base ^ 0xD1B54A32D192ED03ULL) + index * kGolden);
}

}  // namespace disagg
