#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>

namespace robustlat {

// Mixes a root seed with an ordered list of indices into a 64-bit stream key
// (SplitMix64 finalizer applied after each absorbed word).
std::uint64_t derive_key(std::uint64_t root, std::initializer_list<std::uint64_t> path);

// Philox4x32-10 counter-based generator. The 64-bit key selects the stream;
// the 128-bit counter advances one block (four 32-bit words) at a time.
// Output is identical to the Random123 reference for the same key/counter.
class Philox {
 public:
  using Block = std::array<std::uint32_t, 4>;

  explicit Philox(std::uint64_t key) noexcept;
  Philox(std::uint64_t root, std::initializer_list<std::uint64_t> path)
      : Philox(derive_key(root, path)) {}

  static Block encrypt(Block counter, std::array<std::uint32_t, 2> key) noexcept;

  std::uint32_t next_u32() noexcept;
  std::uint64_t next_u64() noexcept;

  // Unbiased integer in [0, n); n must be positive.
  std::uint64_t uniform_below(std::uint64_t n) noexcept;
  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() noexcept;
  // Standard normal via Box-Muller (consumes two 64-bit draws).
  double normal() noexcept;

 private:
  std::array<std::uint32_t, 2> key_;
  std::uint64_t counter_ = 0;
  Block buffer_{};
  int used_ = 4;
};

// Draws `count` distinct values from [0, n) uniformly without replacement
// using a partial Fisher-Yates shuffle; the result keeps draw order.
void sample_without_replacement(Philox& rng, std::size_t n, std::size_t count,
                                std::span<std::size_t> out);

}  // namespace robustlat
