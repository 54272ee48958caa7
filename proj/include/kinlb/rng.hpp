#pragma once
#include <cstdint>
#include <cmath>
#include <thread>
#include <vector>
#include <functional>

#include "kinlb/vec.hpp"

namespace kinlb {

// Counter-based generator: every draw is a pure hash of (seed, stream, counter),
// so parallel consumers need no shared state and any partition of the index
// space reproduces the same values.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t counter_hash(uint64_t seed, uint64_t stream, uint64_t ctr) {
  return mix64(mix64(mix64(seed) ^ stream) ^ ctr);
}

struct Rng {
  uint64_t seed = 0, stream = 0, ctr = 0;

  Rng(uint64_t s, uint64_t str) : seed(s), stream(str) {}

  uint64_t next_u64() { return counter_hash(seed, stream, ctr++); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double normal() {
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  Vec3 on_sphere() {
    double z = uniform(-1.0, 1.0);
    double ph = uniform(0.0, 6.283185307179586477);
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {r * std::cos(ph), r * std::sin(ph), z};
  }

  Vec3 in_ball(Vec3 c, double R) {
    double u = uniform();
    double r = R * std::cbrt(u);
    return c + r * on_sphere();
  }

  Vec3 in_box(const Aabb& b) {
    return {uniform(b.lo.x, b.hi.x), uniform(b.lo.y, b.hi.y), uniform(b.lo.z, b.hi.z)};
  }
};

// Deterministic parallel reduction: f(i) summed over i < n in fixed 4096-wide
// blocks whose partial sums are merged in block order. The result is identical
// for every thread count.
inline double deterministic_sum(uint64_t n, const std::function<double(uint64_t)>& f,
                                int threads) {
  const uint64_t block = 4096;
  const uint64_t nblocks = (n + block - 1) / block;
  std::vector<double> partial(nblocks, 0.0);
  auto work = [&](uint64_t b0, uint64_t b1) {
    for (uint64_t b = b0; b < b1; b++) {
      double s = 0.0;
      uint64_t i1 = std::min(n, (b + 1) * block);
      for (uint64_t i = b * block; i < i1; i++) s += f(i);
      partial[b] = s;
    }
  };
  if (threads <= 1 || nblocks < 2) {
    work(0, nblocks);
  } else {
    int nt = std::min<uint64_t>(threads, nblocks);
    std::vector<std::thread> pool;
    uint64_t per = (nblocks + nt - 1) / nt;
    for (int t = 0; t < nt; t++) {
      uint64_t b0 = t * per, b1 = std::min(nblocks, b0 + per);
      if (b0 >= b1) break;
      pool.emplace_back(work, b0, b1);
    }
    for (auto& th : pool) th.join();
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace kinlb
