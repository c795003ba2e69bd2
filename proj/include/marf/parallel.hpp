#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace marf {

/// Number of worker threads to use when the caller asks for "auto" (<= 0).
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Calls fn(begin, end, worker) over `threads` contiguous chunks of [0, n).
/// Chunk boundaries depend only on n and threads. The first exception thrown
/// by any worker is rethrown after all workers join.
template <typename Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  threads = std::max(1, threads);
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, n, 0);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&, begin, end, w] {
      try {
        fn(begin, end, static_cast<int>(w));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Per-index convenience wrapper around parallel_chunks.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  parallel_chunks(n, threads, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace marf
