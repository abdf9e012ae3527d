#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dynser {

inline constexpr double kPi = 3.14159265358979323846;

// Error taxonomy. The CLI maps these onto stable exit codes, so new error
// types should derive from one of the bases below.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };  // shape/axis mismatch
struct ParameterError : Error { using Error::Error; };  // bad argument value
struct ProtocolError : Error { using Error::Error; };   // contract misuse
struct DataError : Error { using Error::Error; };       // labels, manifests
struct IoError : Error { using Error::Error; };
struct UnsupportedFormatError : IoError { using IoError::IoError; };
struct NumericError : Error { using Error::Error; };    // NaN/Inf escaped

enum class Mode { kTrain, kEval };

// Deterministic RNG. std::mt19937_64 is fully specified by the standard;
// the std distributions are not, so every draw goes through our own
// mappings to keep runs reproducible across compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; always consumes exactly two draws
  double normal() {
    double u1 = std::max(uniform(), 1e-300);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double bernoulli(double p_one) { return uniform() < p_one ? 1.0 : 0.0; }

  std::uint64_t below(std::uint64_t n) { return n ? gen_() % n : 0; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

// Stable seed derivation for independent substreams (fold index, dropout
// masks, init, ...). splitmix64 finalizer decorrelates nearby inputs.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t h = fnv1a64(tag);
  h = fnv1a64(&base, sizeof(base), h);
  h = fnv1a64(&index, sizeof(index), h);
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

}  // namespace dynser
