#ifndef ADVRF_CORE_RNG_HPP_
#define ADVRF_CORE_RNG_HPP_

#include <cmath>
#include <cstdint>

namespace advrf {

// PCG32 with an explicit, serializable state. std:: distributions are
// implementation-defined, so uniform/normal draws are coded out by hand to
// keep runs bit-reproducible.
class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                 std::uint64_t stream = 0xda3e39cb94b95bdbULL) {
    state_ = 0u;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted =
        static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    return static_cast<std::uint32_t>(uniform() * static_cast<double>(n)) %
           (n == 0 ? 1 : n);
  }

  // Box-Muller; caches the spare draw.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586 * u2);
    has_spare_ = true;
    return mag * std::cos(6.283185307179586 * u2);
  }

  struct State {
    std::uint64_t state;
    std::uint64_t inc;
    std::uint8_t has_spare;
    double spare;
  };

  State save() const { return {state_, inc_, has_spare_ ? std::uint8_t{1} : std::uint8_t{0}, spare_}; }

  void restore(const State& s) {
    state_ = s.state;
    inc_ = s.inc;
    has_spare_ = s.has_spare != 0;
    spare_ = s.spare;
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used for parameter hashing and derived stream seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 14695981039346656037ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return fnv1a64(&b, sizeof(b), fnv1a64(&a, sizeof(a)));
}

}  // namespace advrf

#endif  // ADVRF_CORE_RNG_HPP_
