#include "moescope/common.hpp"

#include <cstdlib>

namespace moescope::detail {

Worker& Worker::instance() {
  static Worker w;
  return w;
}

Worker::Worker() {
  if (const char* env = std::getenv("MOESCOPE_THREADS")) {
    if (std::strtoul(env, nullptr, 10) <= 1) enabled_ = false;
  }
  if (enabled_) thread_ = std::thread([this] { loop(); });
}

Worker::~Worker() {
  if (!enabled_) return;
  {
    std::lock_guard lock(mutex_);
    quit_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

void Worker::loop() {
  std::unique_lock lock(mutex_);
  for (;;) {
    cv_.wait(lock, [this] { return job_ != nullptr || quit_; });
    if (quit_) return;
    auto* job = job_;
    auto* ctx = ctx_;
    lock.unlock();
    job(ctx);
    lock.lock();
    job_ = nullptr;
    cv_.notify_all();
  }
}

void Worker::post(void (*job)(void*), void* ctx) {
  std::lock_guard lock(mutex_);
  job_ = job;
  ctx_ = ctx;
  cv_.notify_all();
}

void Worker::wait() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [this] { return job_ == nullptr; });
}

}  // namespace moescope::detail
