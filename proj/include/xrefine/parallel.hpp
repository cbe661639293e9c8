#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

// Deterministic data parallelism: work is split into a fixed number of chunks
// that depends only on the item count, never on the thread count. Each chunk
// is processed start-to-finish by one thread into chunk-local state, so any
// later in-order reduction over chunks is bitwise reproducible whether the
// pool has 1 thread or 16.

namespace xrefine {

inline int default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) return 1;
  return static_cast<int>(hw > 16 ? 16 : hw);
}

/// Calls fn(chunk_index, begin, end) for chunk_count half-open ranges covering
/// [0, n). The first exception thrown by any chunk is rethrown to the caller.
inline void parallel_chunks(int n, int chunk_count, int threads,
                            const std::function<void(int, int, int)>& fn) {
  if (n <= 0) return;
  if (chunk_count > n) chunk_count = n;
  if (chunk_count < 1) chunk_count = 1;
  if (threads <= 0) threads = default_thread_count();
  if (threads > chunk_count) threads = chunk_count;

  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;

  auto worker = [&]() {
    for (;;) {
      const int c = next.fetch_add(1);
      if (c >= chunk_count || failed.load()) return;
      const int begin = static_cast<int>(static_cast<long long>(n) * c / chunk_count);
      const int end = static_cast<int>(static_cast<long long>(n) * (c + 1) / chunk_count);
      try {
        fn(c, begin, end);
      } catch (...) {
        {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
        failed.store(true);
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads - 1));
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace xrefine
