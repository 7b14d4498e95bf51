#pragma once

// Shared plumbing: error types, deterministic RNG, env-capped parallel
// loops, checksums.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace atomo {

// ---------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInput : Error { using Error::Error; };
struct InvalidRotation : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct FileFormatError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct MissingAnchor : Error { using Error::Error; };
struct AnchorMasked : Error { using Error::Error; };
struct UnknownConfig : Error { using Error::Error; };
struct BadFlag : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };

// ---------------------------------------------------------------------
// Matrix aliases. Row-major so per-frame rows are contiguous.
// ---------------------------------------------------------------------

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// ---------------------------------------------------------------------
// Deterministic RNG (SplitMix64 core, Box-Muller normals). Stable across
// platforms, unlike std distributions.
// ---------------------------------------------------------------------

inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; second sample cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = (double((next() >> 11) + 1)) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // uniform integer in [0, n)
  int64_t below(int64_t n) { return int64_t(next() % uint64_t(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // independent child stream; parent state untouched
  Rng fork(uint64_t stream) const {
    return Rng(mix64(state_ ^ (0xD1B54A32D192ED03ull * (stream + 1))));
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------
// Parallelism. ATMO_THREADS caps worker count; chunking is static so
// results do not depend on scheduling.
// ---------------------------------------------------------------------

inline int thread_cap() {
  static int cap = [] {
    if (const char* env = std::getenv("ATMO_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : int(hc);
  }();
  return cap;
}

// f(begin, end) over [0, n) split into at most thread_cap() contiguous chunks.
// The first exception thrown by a worker is rethrown on the calling thread.
template <typename F>
void parallel_chunks(int64_t n, F&& f) {
  int workers = int(std::min<int64_t>(thread_cap(), n));
  if (workers <= 1) {
    if (n > 0) f(int64_t(0), n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers));
  std::exception_ptr err;
  std::mutex err_mu;
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t b = w * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&f, &err, &err_mu, b, e] {
      try {
        f(b, e);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------
// FNV-1a 64-bit, used for artifact checksums in run manifests.
// ---------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace atomo
