#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace cgnc {

// splitmix64 finalizer; used to expand one root seed into per-purpose seeds.
std::uint64_t mix64(std::uint64_t x);

// 64-bit FNV-1a over bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Derive a child seed from (root, purpose, index) so that streams for
// different purposes and samples never alias.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t index = 0);

// Random source with distributions implemented here rather than through
// <random>'s distributions, whose output is implementation-defined. The
// engine (mt19937_64) is fully specified by the standard, so streams are
// identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  // First k entries of a uniformly random permutation of [0, n).
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cgnc
