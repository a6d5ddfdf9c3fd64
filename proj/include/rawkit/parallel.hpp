#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace rawkit {

// 0 means one worker per hardware thread.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Splits [0, rows) into contiguous chunks and runs body(begin, end) on each.
/// Bodies must only write rows they own, so the result never depends on the split.
template <typename Body>
void parallel_rows(int rows, int threads, Body&& body) {
  const int workers = std::clamp(resolve_threads(threads), 1, std::max(rows, 1));
  if (workers == 1) {
    body(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  const int chunk = (rows + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int begin = w * chunk;
    const int end = std::min(rows, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, w, begin, end] {
      try {
        body(begin, end);
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

}  // namespace rawkit
