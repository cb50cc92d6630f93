#include "carry/rng.hpp"

namespace carry {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string_view name)
    : key_(mix64(mix64(seed) ^ fnv1a(name))) {}

std::uint64_t RngStream::next_u64() { return mix64(key_ ^ mix64(counter_++)); }

void RngStream::fill_u64(std::uint64_t* out, std::size_t n) {
  const std::uint64_t key = key_, base = counter_;
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) out[i] = mix64(key ^ mix64(base + i));
  counter_ += n;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r < limit) return r % n;
  }
}

RngStream RngStream::fork(std::uint64_t index) const {
  RngStream child;
  child.key_ = mix64(key_ ^ mix64(index ^ 0x5851f42d4c957f2dULL));
  return child;
}

}  // namespace carry
