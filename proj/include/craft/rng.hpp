#pragma once

// Counter-based random streams.
//
// Every random draw in the library comes from a stream identified by a path of
// integer keys hanging off one master seed, e.g. (seed, pass, step, particle).
// A stream's output depends only on its key path, so results do not depend on
// the order in which particles are visited.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace craft {

namespace detail {
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
}  // namespace detail

/// xoshiro256** engine; satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t key) noexcept {
    std::uint64_t z = key;
    for (auto& s : state_) {
      z = detail::splitmix64(z);
      s = z;
    }
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Both variates are used.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Node in the key tree. Cheap to copy; `child` descends, `stream` makes an engine.
class RngKey {
 public:
  constexpr explicit RngKey(std::uint64_t seed) noexcept : key_(detail::splitmix64(seed ^ 0x5eedULL)) {}

  constexpr RngKey child(std::uint64_t tag) const noexcept {
    return RngKey(key_, detail::splitmix64(key_ ^ detail::splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }
  Rng stream(std::uint64_t index = 0) const noexcept { return Rng(child(index).key_); }
  constexpr std::uint64_t value() const noexcept { return key_; }

 private:
  constexpr RngKey(std::uint64_t, std::uint64_t derived) noexcept : key_(derived) {}
  std::uint64_t key_;
};

/// Well-known child tags so independent consumers never share a stream.
namespace stream_tag {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kResample = 2;
inline constexpr std::uint64_t kMcmc = 3;
inline constexpr std::uint64_t kStep = 4;
inline constexpr std::uint64_t kPass = 5;
inline constexpr std::uint64_t kAccept = 6;
inline constexpr std::uint64_t kFlowInit = 7;
inline constexpr std::uint64_t kTrain = 8;
inline constexpr std::uint64_t kValidation = 9;
inline constexpr std::uint64_t kTest = 10;
inline constexpr std::uint64_t kProposal = 11;
}  // namespace stream_tag

}  // namespace craft
