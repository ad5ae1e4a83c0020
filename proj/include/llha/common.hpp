#ifndef LLHA_COMMON_HPP
#define LLHA_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace llha {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error hierarchy. The CLI maps ValidationError to exit code 2; everything
// else is an internal failure.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad input data or violated precondition.
struct ValidationError : Error {
  using Error::Error;
};

// Numerically degenerate problem instance (rank-deficient system,
// unrecoverable pose, ...).
struct DegenerateError : Error {
  using Error::Error;
};

// Inconsistent module wiring detected at construction time.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed on-disk record. `record` is the index of the offending record
// when known.
struct ParseError : Error {
  explicit ParseError(const std::string& msg, std::int64_t record_index = -1)
      : Error(record_index < 0
                  ? msg
                  : msg + " (record " + std::to_string(record_index) + ")"),
        record(record_index) {}
  std::int64_t record = -1;
};

struct IoError : Error {
  using Error::Error;
};

// Deterministic random source. The generator and every distribution are
// implemented here rather than via <random> distributions, so that a seed
// produces the same stream on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ull : seed) {
    // Warm up so that small seeds decorrelate.
    next_u64();
    next_u64();
  }

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller (uncached; one sample per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  Eigen::Vector3d unit_vector3() {
    const double z = uniform(-1.0, 1.0);
    const double phi = uniform(0.0, 6.283185307179586476925286766559);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {r * std::cos(phi), r * std::sin(phi), z};
  }

 private:
  std::uint64_t state_;
};

// Per-index child seed for embarrassingly parallel generation; the (seed,
// index) pair fully determines the child stream.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// FNV-1a, used for config hashes embedded in checkpoints.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw IoError("unexpected end of file while reading u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(d));
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace io
}  // namespace llha

#endif  // LLHA_COMMON_HPP
