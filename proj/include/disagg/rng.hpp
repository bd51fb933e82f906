#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace disagg {

/// Counter-based random stream. Draw k is a pure function of (seed, k), so
/// sequences are identical on every platform and compiler.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer on [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;
  std::uint64_t poisson(double mean);

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Derive an independent seed from a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept;

}  // namespace disagg
