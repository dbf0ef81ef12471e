#pragma once

#include <cstdint>
#include <functional>

namespace fpx {

// Number of worker threads: FPX_THREADS env var if set, otherwise the
// hardware count. set_max_threads overrides both (0 = back to default).
int max_threads();
void set_max_threads(int n);

// Runs fn(i) for i in [0, count). Work is split into contiguous index
// ranges; each index is processed by exactly one worker, so any
// computation whose per-index result does not depend on the partition is
// bit-identical for every thread count.
void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn);

// Range flavor for coarser tasks: fn(begin, end) over disjoint chunks.
void parallel_for_ranges(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& fn);

} // namespace fpx
