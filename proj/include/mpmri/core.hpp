// Shared plumbing: error taxonomy, seeded RNG, small dense containers.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mpmri {

enum class Err {
  MissingFile,
  MalformedHeader,
  NonInvertibleAffine,
  UnwritablePath,
  InvalidVolume,
  InvalidMaskValue,
  InterpMismatch,
  NegativeIntensity,
  EmptyMask,
  GridMismatch,
  DegenerateIntensity,
  OutOfRangeGGG,
  SequenceMisaligned,
  EmptySequence,
  TooFewPatients,
  SingleClass,
  InvalidDescriptor,
  NonFiniteLoss,
  ShapeMismatch,
  SpaceExhausted,
  NoConvLayer,
  BadK,
  MissingModelBundle,
  InvalidConfig,
};

inline const char* to_string(Err e) {
  switch (e) {
    case Err::MissingFile: return "MissingFile";
    case Err::MalformedHeader: return "MalformedHeader";
    case Err::NonInvertibleAffine: return "NonInvertibleAffine";
    case Err::UnwritablePath: return "UnwritablePath";
    case Err::InvalidVolume: return "InvalidVolume";
    case Err::InvalidMaskValue: return "InvalidMaskValue";
    case Err::InterpMismatch: return "InterpMismatch";
    case Err::NegativeIntensity: return "NegativeIntensity";
    case Err::EmptyMask: return "EmptyMask";
    case Err::GridMismatch: return "GridMismatch";
    case Err::DegenerateIntensity: return "DegenerateIntensity";
    case Err::OutOfRangeGGG: return "OutOfRangeGGG";
    case Err::SequenceMisaligned: return "SequenceMisaligned";
    case Err::EmptySequence: return "EmptySequence";
    case Err::TooFewPatients: return "TooFewPatients";
    case Err::SingleClass: return "SingleClass";
    case Err::InvalidDescriptor: return "InvalidDescriptor";
    case Err::NonFiniteLoss: return "NonFiniteLoss";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::SpaceExhausted: return "SpaceExhausted";
    case Err::NoConvLayer: return "NoConvLayer";
    case Err::BadK: return "BadK";
    case Err::MissingModelBundle: return "MissingModelBundle";
    case Err::InvalidConfig: return "InvalidConfig";
  }
  return "UnknownError";
}

class PipelineError : public std::runtime_error {
 public:
  PipelineError(Err code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}
  Err code() const noexcept { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& detail) {
  throw PipelineError(code, detail);
}

inline void require(bool cond, Err code, const std::string& detail) {
  if (!cond) fail(code, detail);
}

// splitmix64; used both for seed derivation and to seed the main generator.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic seed derivation for independent streams (per patient, per
// trial, per epoch/sample). Order of arguments matters.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ULL;
  h ^= splitmix64(s);
  s ^= b + 0xda942042e4dd58b5ULL;
  h ^= splitmix64(s);
  s ^= c + 0xca62c1d6ca62c1d6ULL;
  h ^= splitmix64(s);
  return h;
}

// xoshiro256++ with hand-rolled distributions so streams are identical across
// standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; one variate per call keeps the stream easy to reason about.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

// Row-major 2D buffer used for slices, patches, heatmaps.
template <class T>
struct Grid2D {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Grid2D() = default;
  Grid2D(int r, int c, T fill = T{}) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}

  T& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Grid2D& o) const { return rows == o.rows && cols == o.cols; }
};

using Patch = Grid2D<float>;

inline double mean_of(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Runs fn(0..n-1) on up to `jobs` threads. Tasks must be independent; the
// first exception is rethrown on the calling thread after all workers drain.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  const auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(static_cast<std::size_t>(jobs), n);
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mpmri
