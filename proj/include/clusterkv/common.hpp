#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ckv {

static_assert(std::endian::native == std::endian::little,
              "trace format assumes a little-endian host");

// ----------------------------------------------------------------------------
// Errors
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid arguments, malformed configs, degenerate inputs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failures (open/read/write).
class IoError : public Error {
 public:
  using Error::Error;
};

// Structural problems in a trace file.
class ParseError : public Error {
 public:
  enum class Code {
    BadMagic,
    BadVersion,
    Truncated,
    DimOverflow,
    BadMetadata,
    TrailingData,
  };

  ParseError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

// ----------------------------------------------------------------------------
// Dense row-major float32 matrix
// ----------------------------------------------------------------------------

struct Matrix {
  uint32_t rows = 0;
  uint32_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(uint32_t r, uint32_t c) : rows(r), cols(c), data(size_t(r) * c, 0.0f) {}

  std::span<const float> row(uint32_t i) const {
    return {data.data() + size_t(i) * cols, cols};
  }
  std::span<float> row(uint32_t i) {
    return {data.data() + size_t(i) * cols, cols};
  }

  bool operator==(const Matrix&) const = default;
};

inline bool is_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(),
                     [](float v) { return std::isfinite(v); });
}

// Dot product with 64-bit accumulation; shared by attention, selection
// scoring and the exact top-B oracle so that equal inputs give equal bits.
inline double dot_f64(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

inline double norm_f64(std::span<const float> a) {
  return std::sqrt(dot_f64(a, a));
}

// ----------------------------------------------------------------------------
// Deterministic RNG helpers
// ----------------------------------------------------------------------------

constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Splittable sub-stream derivation, e.g. per (seed, layer, head).
constexpr uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (a + 0x9e3779b97f4a7c15ull));
  h = splitmix64(h ^ (b + 0xbf58476d1ce4e5b9ull));
  return h;
}

// Minimal xoshiro-free engine: mt19937_64 is bit-stable across platforms,
// the standard distributions are not, so uniforms and gaussians are built
// by hand on top of the raw engine output.
template <typename Engine>
inline double uniform01(Engine& rng) {
  return double(rng() >> 11) * 0x1.0p-53;
}

template <typename Engine>
inline uint64_t uniform_below(Engine& rng, uint64_t n) {
  return rng() % n;
}

// Box-Muller without the cached second variate.
template <typename Engine>
inline double gaussian(Engine& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  double u2 = uniform01(rng);
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

// Normalizes in place; returns the pre-normalization norm.
inline double normalize(std::span<float> v) {
  double n = norm_f64(v);
  if (n > 0.0) {
    for (auto& x : v) x = float(double(x) / n);
  }
  return n;
}

}  // namespace ckv
