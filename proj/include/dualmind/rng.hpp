#pragma once
// Deterministic randomness. Every run owns one root seed; subsystems derive
// independent streams from it by name through seed_splitter, so adding a new
// consumer never perturbs existing streams. The generator is counter-free
// splitmix64 with hand-rolled distributions, making sequences identical
// across standard libraries and platforms.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dm {

inline std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b * 0xff51afd7ed558ccdull + 0x9e3779b97f4a7c15ull);
  return splitmix64(s);
}

class rng {
 public:
  explicit rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }
  // [lo, hi] inclusive
  int uniform_int(int lo, int hi) { return lo + int(below(std::uint64_t(hi - lo + 1))); }

  bool bernoulli(double p) { return uniform() < p; }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

class seed_splitter {
 public:
  explicit seed_splitter(std::uint64_t root) : root_(root) {}

  std::uint64_t derive(std::string_view name, std::uint64_t index = 0) const {
    return mix_u64(mix_u64(root_, fnv1a64(name)), index);
  }
  rng stream(std::string_view name, std::uint64_t index = 0) const {
    return rng(derive(name, index));
  }
  std::uint64_t root() const { return root_; }

 private:
  std::uint64_t root_;
};

}  // namespace dm
