#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ctrlflow {

/// Process-wide worker cap, set once from the command line.
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}

inline void set_thread_cap(int n) { thread_cap() = std::max(1, n); }

/// Runs fn(i) for i in [0, n). Each index writes only its own output slot,
/// so results do not depend on the worker count. The first exception is
/// rethrown after all workers finish.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(thread_cap().load(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace ctrlflow
