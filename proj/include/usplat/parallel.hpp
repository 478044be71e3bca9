#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace usplat {

enum class Execution { Sequential, Parallel };

inline int resolve_threads(Execution mode, int requested) {
  if (mode == Execution::Sequential) return 1;
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Splits [0, n) into `workers` contiguous equal-size chunks and runs fn(begin, end, worker).
/// Worker 0 runs on the calling thread.
template <typename Fn>
void parallel_chunks(std::size_t n, int workers, Fn&& fn) {
  workers = static_cast<int>(std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1,
                                                     std::max<std::size_t>(n, 1)));
  if (workers == 1) {
    fn(std::size_t{0}, n, 0);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) {
    const std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
    pool.emplace_back([&fn, b, e, w] { fn(b, e, w); });
  }
  fn(std::size_t{0}, std::min(n, chunk), 0);
}

}  // namespace usplat
