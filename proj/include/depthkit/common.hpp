#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace depthkit {

// ---------------------------------------------------------------------------
// Error taxonomy. CLI maps ConfigError (and subclasses) to exit 2 and
// NumericalError to exit 3; everything else is a plain failure.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct RangeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct VocabError : Error {
  using Error::Error;
};

struct ContextError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 stream plus Box-Muller normals; the whole
// kit draws from this so runs are reproducible across platforms and
// standard-library versions.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// One-shot mix of two 64-bit values into one (for per-epoch/per-stream seeds).
inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // burn a few outputs so small seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // standard normal via Box-Muller, second value cached
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // uniform integer in [0, n)
  int64_t below(int64_t n) {
    return int64_t(next_u64() % uint64_t(n));
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace depthkit
