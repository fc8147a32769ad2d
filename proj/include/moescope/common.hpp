#pragma once

#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>

namespace moescope {

// Validation failures: bad shapes, bad arguments, malformed files.
// CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatches; a ValidationError that names the offending axes.
class ShapeError : public ValidationError {
 public:
  explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

// Numeric failures: non-finite losses, empty softmax support, degenerate
// statistics, non-convergence. CLI maps these to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a 64-bit. Used for manifests and seed derivation, not security.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

std::string hex64(std::uint64_t v);

namespace detail {
// One persistent helper thread with a cheap job handoff. Spawning a fresh
// std::thread per parallel region costs more than many of the regions.
class Worker {
 public:
  static Worker& instance();
  void post(void (*job)(void*), void* ctx);
  void wait();
  bool enabled() const { return enabled_; }

 private:
  Worker();
  ~Worker();
  void loop();
  std::thread thread_;
  std::mutex mutex_;
  std::condition_variable cv_;
  void (*job_)(void*) = nullptr;
  void* ctx_ = nullptr;
  bool quit_ = false;
  bool enabled_ = true;
};
}  // namespace detail

// Runs fn over [0,n) split at a fixed midpoint; the left half may run on the
// helper thread. The split and the per-range iteration order never change,
// so results are bitwise identical whether or not the helper is used, as
// long as fn writes disjoint ranges. MOESCOPE_THREADS=1 disables the helper.
template <typename Fn>
void parallel_2(std::int64_t n, std::int64_t grain, Fn&& fn) {
  if (n < grain) {
    fn(0, n);
    return;
  }
  const std::int64_t mid = n / 2;
  auto& w = detail::Worker::instance();
  if (!w.enabled()) {
    fn(0, mid);
    fn(mid, n);
    return;
  }
  struct Ctx {
    Fn* fn;
    std::int64_t mid;
  } ctx{&fn, mid};
  w.post([](void* p) {
    auto* c = static_cast<Ctx*>(p);
    (*c->fn)(0, c->mid);
  }, &ctx);
  fn(mid, n);
  w.wait();
}

}  // namespace moescope
