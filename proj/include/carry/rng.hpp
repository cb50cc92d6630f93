#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace carry {

// Counter-based stream: draw i of stream (seed, name) is a pure function of
// (seed, name, i), so streams never perturb each other.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64();
  // Same values as n successive next_u64() calls.
  void fill_u64(std::uint64_t* out, std::size_t n);
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer on [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t cursor() const { return counter_; }
  void seek(std::uint64_t cursor) { counter_ = cursor; }

  // Independent child stream, e.g. one per epoch.
  RngStream fork(std::uint64_t index) const;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace carry
