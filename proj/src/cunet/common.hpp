// Shared basics: error type, deterministic RNG streams, allocation accounting.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cunet {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail(Args&&... parts) {
  std::string msg;
  (msg.append(parts), ...);
  throw Error(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// splitmix64: used to derive independent seeds from (base seed, counter...)
// so shuffling and per-sample augmentation streams are reproducible without
// serializing generator state.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return splitmix64(mix_seed(a, b) ^ splitmix64(c));
}

// xoshiro256** — small, fast, and identical output on every platform, unlike
// std::normal_distribution whose algorithm is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    for (auto& w : s_) {
      seed = splitmix64(seed);
      w = seed;
    }
    has_spare_ = false;
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // standard normal via Box-Muller (deterministic across platforms)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_;
};

// Live tensor storage accounting. Tracks a high-water mark so the training
// memory budget can be asserted without platform-specific RSS probes.
namespace memstats {
inline std::atomic<int64_t>& live_bytes() {
  static std::atomic<int64_t> v{0};
  return v;
}
inline std::atomic<int64_t>& peak_bytes() {
  static std::atomic<int64_t> v{0};
  return v;
}
inline void add(int64_t n) {
  int64_t now = live_bytes().fetch_add(n) + n;
  int64_t peak = peak_bytes().load();
  while (now > peak && !peak_bytes().compare_exchange_weak(peak, now)) {
  }
}
inline void sub(int64_t n) { live_bytes().fetch_sub(n); }
inline void reset_peak() { peak_bytes().store(live_bytes().load()); }
}  // namespace memstats

// Runtime switch for the finite-value scan after each tensor op. On by
// default in debug builds; tests may enable it explicitly in release.
inline bool& debug_checks_flag() {
#ifdef NDEBUG
  static bool enabled = false;
#else
  static bool enabled = true;
#endif
  return enabled;
}

}  // namespace cunet
