// Counter-based splittable random stream built on the splitmix64 finalizer.
// Every consumer owns a SplitStream derived from (root seed, purpose, index),
// so Monte Carlo batches are reproducible independent of thread count.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace jumpbsde {

namespace detail {
inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

class SplitStream {
 public:
  explicit SplitStream(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(detail::splitmix64_mix(seed + 0x9e3779b97f4a7c15ull * (stream + 1))) {}

  // Splits off an independent child stream; does not advance this stream.
  SplitStream split(std::uint64_t index) const {
    return SplitStream(key_ ^ 0xd1342543de82ef95ull, index);
  }

  // Named split for purpose-scoped substreams ("paths", "init", ...).
  SplitStream split(std::string_view purpose, std::uint64_t index) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : purpose) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return SplitStream(key_ ^ h, index);
  }

  std::uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ull;
    return detail::splitmix64_mix(key_ + counter_);
  }

  // Uniform on (0,1); never returns 0 so log() is safe.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; two uniforms per draw, no cached state.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Poisson draw: sequential inversion for small means, Hormann's PTRS
  // transformed rejection for large ones.
  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean < 30.0) return poisson_inversion(mean);
    return poisson_ptrs(mean);
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t poisson_inversion(double mean) {
    double p = std::exp(-mean);
    double cdf = p;
    double u = uniform();
    std::uint64_t k = 0;
    while (u > cdf && k < 2000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }

  std::uint64_t poisson_ptrs(double mean) {
    const double slam = std::sqrt(mean);
    const double loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      double u = uniform() - 0.5;
      double v = uniform();
      double us = 0.5 - std::fabs(u);
      double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
      if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(kf);
      if (kf < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
          kf * loglam - mean - std::lgamma(kf + 1.0)) {
        return static_cast<std::uint64_t>(kf);
      }
    }
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace jumpbsde
