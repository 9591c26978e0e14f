#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace ozlab {

// Runs work(block) for blocks 0, 1, ... in waves of `threads` and hands the
// results to merge(block, result) in block order. merge returns false to stop.
// Each block derives its randomness from its index alone, so the merged result
// does not depend on the thread count.
template <class Result>
void run_blocks(std::size_t max_blocks, unsigned threads, const std::function<Result(std::size_t)>& work,
                const std::function<bool(std::size_t, Result&)>& merge) {
  threads = std::max(1u, threads);
  for (std::size_t first = 0; first < max_blocks; first += threads) {
    const std::size_t n = std::min<std::size_t>(threads, max_blocks - first);
    std::vector<Result> results(n);
    if (n == 1) {
      results[0] = work(first);
    } else {
      std::vector<std::exception_ptr> errors(n);
      std::vector<std::thread> pool;
      for (std::size_t i = 0; i < n; ++i)
        pool.emplace_back([&, i] {
          try {
            results[i] = work(first + i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (std::size_t i = 0; i < n; ++i)
      if (!merge(first + i, results[i])) return;
  }
}

}  // namespace ozlab
