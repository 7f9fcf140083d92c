#pragma once

#include <malloc.h>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace splatflow {

int default_threads();
void set_default_threads(int n);

// Transient Eigen buffers cross glibc's default mmap threshold; without this
// every transformer forward pays page-fault churn on the same few-hundred-KB
// allocations.
inline void tune_malloc_once() {
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
    return true;
  }();
  (void)done;
}

// Splits [0, n) into contiguous chunks, one per worker. Chunk boundaries
// depend only on n and the thread count, so callers that combine per-chunk
// partials in chunk order stay deterministic.
inline void parallel_for_chunks(
    std::int64_t n, int threads,
    const std::function<void(std::int64_t begin, std::int64_t end, int chunk)>& fn) {
  if (n <= 0) return;
  const int workers =
      std::max(1, static_cast<int>(std::min<std::int64_t>(threads, n)));
  if (workers == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::int64_t base = n / workers;
  const std::int64_t rem = n % workers;
  std::int64_t begin = 0;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t len = base + (w < rem ? 1 : 0);
    const std::int64_t end = begin + len;
    pool.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
    begin = end;
  }
  for (auto& t : pool) t.join();
}

}  // namespace splatflow
