// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string_view>

namespace opera {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives the seed of an independent stream from (master, label, index).
// Streams are keyed, not split sequentially, so adding a new label or index
// never perturbs the draws of an existing one.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the label
  for (unsigned char c : label) {
    h = (h ^ c) * 0x100000001b3ULL;
  }
  std::uint64_t s = master ^ h;
  (void)splitmix64(s);
  s ^= index;
  (void)splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  // Unbiased integer in [0, n). Lemire multiply-with-rejection.
  std::size_t index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::index: empty range");
    std::uint64_t range = static_cast<std::uint64_t>(n);
    std::uint64_t x = gen_();
    __uint128_t m = static_cast<__uint128_t>(x) * range;
    std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo < range) {
      std::uint64_t threshold = (0 - range) % range;
      while (lo < threshold) {
        x = gen_();
        m = static_cast<__uint128_t>(x) * range;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::size_t>(m >> 64);
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, stateless across calls.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  void save(std::ostream& os) const { os << gen_; }
  void load(std::istream& is) { is >> gen_; }

  friend bool operator==(const Rng& a, const Rng& b) { return a.gen_ == b.gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace opera
