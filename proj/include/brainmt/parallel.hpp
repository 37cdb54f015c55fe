#pragma once

#include <cstdint>
#include <functional>

namespace brainmt::parallel {

// Intra-op worker count. Resolution order: explicit set_max_threads() call,
// then the BRAINMT_THREADS environment variable, then hardware concurrency.
int max_threads();
void set_max_threads(int n);

// Runs body(begin, end) over a contiguous partition of [0, n). Partitions
// depend only on n and the thread count, never on scheduling, so any
// reduction done per-range and combined in range order is deterministic.
// Falls back to a single inline call when n < min_parallel or one thread.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body,
                  int64_t min_parallel = 1024);

}  // namespace brainmt::parallel
