#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tracformer {

// Runs fn(begin, end) over fixed chunk boundaries that do not depend on the
// thread count, so per-chunk results can be reduced deterministically.
inline void parallel_chunks(size_t n_items, size_t n_chunks, int threads,
                            const std::function<void(size_t, size_t, size_t)>& fn /* (chunk, begin, end) */) {
  if (n_items == 0) return;
  n_chunks = std::max<size_t>(1, std::min(n_chunks, n_items));
  const size_t chunk_size = (n_items + n_chunks - 1) / n_chunks;
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n_chunks)));

  std::exception_ptr error;
  std::mutex error_mu;
  auto run_chunk = [&](size_t c) {
    const size_t begin = c * chunk_size;
    const size_t end = std::min(n_items, begin + chunk_size);
    if (begin >= end) return;
    try {
      fn(c, begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!error) error = std::current_exception();
    }
  };

  if (workers == 1) {
    for (size_t c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w]() {
        for (size_t c = static_cast<size_t>(w); c < n_chunks; c += static_cast<size_t>(workers)) run_chunk(c);
      });
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace tracformer
