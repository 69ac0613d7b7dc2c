#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace fixattn {

// Runs fn(begin, end) over contiguous blocks of [0, count) on up to `threads`
// threads. The first exception thrown by a worker is rethrown to the caller.
template <class Fn>
void parallel_blocks(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads <= 1) {
    if (count > 0) fn(std::size_t{0}, count);
    return;
  }
  const std::size_t block = (count + threads - 1) / threads;
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    const auto begin = t * block;
    const auto end = std::min(count, begin + block);
    if (begin >= end) break;
    pool.emplace_back([&, t, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace fixattn
