// Minimal fork-join helper for batch-parallel loops.
//
// Worker count is capped by the CLD_LAB_THREADS environment variable (default:
// hardware concurrency). Loops are split into contiguous index ranges; callers
// that reduce must either write per-index slots or combine per-range partials
// in range order so results do not depend on the worker count.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace cldlab {

inline int max_workers() {
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("CLD_LAB_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

// fn(begin, end) over a partition of [0, n); ranges are contiguous and
// processed by at most max_workers() threads.
template <class Fn>
void parallel_ranges(int64_t n, Fn&& fn, int64_t min_grain = 1024) {
  if (n <= 0) return;
  int workers = max_workers();
  if (min_grain > 0) {
    workers = int(std::min<int64_t>(workers, (n + min_grain - 1) / min_grain));
  }
  if (workers <= 1) {
    fn(int64_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) {
    const int64_t b = n * w / workers;
    const int64_t e = n * (w + 1) / workers;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(int64_t{0}, n / workers);  // first range runs on the calling thread
  for (auto& th : pool) th.join();
}

// fn(i) for each i in [0, n).
template <class Fn>
void parallel_for(int64_t n, Fn&& fn, int64_t min_grain = 1024) {
  parallel_ranges(
      n,
      [&fn](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) fn(i);
      },
      min_grain);
}

// Sum of fn(i) over [0, n), reduced chunkwise: each fixed-width chunk is
// summed by one task and the chunk partials are combined in index order, so
// the result is bit-identical for every worker count.
template <class Fn>
double deterministic_sum(int64_t n, Fn&& fn, int64_t chunk = 4096) {
  if (n <= 0) return 0.0;
  const int64_t n_chunks = (n + chunk - 1) / chunk;
  std::vector<double> partial(size_t(n_chunks), 0.0);
  parallel_for(
      n_chunks,
      [&](int64_t c) {
        const int64_t b = c * chunk;
        const int64_t e = std::min(n, b + chunk);
        double s = 0.0;
        for (int64_t i = b; i < e; ++i) s += fn(i);
        partial[size_t(c)] = s;
      },
      1);
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

}  // namespace cldlab
