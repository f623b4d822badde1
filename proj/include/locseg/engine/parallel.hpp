#ifndef LOCSEG_ENGINE_PARALLEL_HPP
#define LOCSEG_ENGINE_PARALLEL_HPP

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace locseg {

// Fixed-size worker pool. parallel_for hands each worker a disjoint index range,
// so callers that write only to their own range stay deterministic.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t workers) {
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this, i] { run(i); });
  }
  ~ThreadPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_) t.join();
  }
  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const { return threads_.size() + 1; }

  /// Runs body(begin, end) over [0, n) split into size() contiguous chunks.
  void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t parts = std::min(n, size());
    if (parts <= 1) {
      if (n) body(0, n);
      return;
    }
    std::unique_lock lock(mutex_);
    body_ = &body;
    n_ = n;
    parts_ = parts;
    pending_ = parts - 1;
    error_ = nullptr;
    ++generation_;
    lock.unlock();
    wake_.notify_all();

    std::exception_ptr mine;
    try {
      body(0, n / parts);
    } catch (...) {
      mine = std::current_exception();
    }
    lock.lock();
    done_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    if (mine) std::rethrow_exception(mine);
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void run(std::size_t worker) {
    std::size_t seen = 0;
    std::unique_lock lock(mutex_);
    for (;;) {
      wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      const std::size_t part = worker + 1;
      if (part >= parts_) continue;
      const auto* body = body_;
      const std::size_t begin = n_ * part / parts_;
      const std::size_t end = n_ * (part + 1) / parts_;
      lock.unlock();
      std::exception_ptr err;
      try {
        (*body)(begin, end);
      } catch (...) {
        err = std::current_exception();
      }
      lock.lock();
      if (err && !error_) error_ = err;
      if (--pending_ == 0) done_.notify_one();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
  std::size_t n_ = 0;
  std::size_t parts_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  std::exception_ptr error_;
  bool stop_ = false;
};

namespace detail {
struct PoolHolder {
  std::mutex mutex;
  std::unique_ptr<ThreadPool> pool;
  std::size_t threads = 1;
};
inline PoolHolder& pool_holder() {
  static PoolHolder holder;
  return holder;
}
inline thread_local bool in_parallel_region = false;
}  // namespace detail

/// Caps worker parallelism for every kernel. Results never depend on this value.
inline void set_num_threads(std::size_t n) {
  auto& h = detail::pool_holder();
  std::lock_guard lock(h.mutex);
  n = std::max<std::size_t>(n, 1);
  if (n == h.threads) return;
  h.pool.reset();
  h.threads = n;
  if (n > 1) h.pool = std::make_unique<ThreadPool>(n - 1);
}

inline std::size_t num_threads() { return detail::pool_holder().threads; }

inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  auto& h = detail::pool_holder();
  if (!h.pool || n < 2 || detail::in_parallel_region) {
    if (n) body(0, n);
    return;
  }
  // Nested calls run inline on the calling worker.
  h.pool->parallel_for(n, [&body](std::size_t b, std::size_t e) {
    detail::in_parallel_region = true;
    try {
      body(b, e);
    } catch (...) {
      detail::in_parallel_region = false;
      throw;
    }
    detail::in_parallel_region = false;
  });
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_PARALLEL_HPP
