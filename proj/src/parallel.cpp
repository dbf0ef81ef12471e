#include "fpx/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fpx {

namespace {
std::atomic<int> g_override{0};

int default_threads() {
    if (const char* env = std::getenv("FPX_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}
} // namespace

int max_threads() {
    const int o = g_override.load(std::memory_order_relaxed);
    return o > 0 ? o : default_threads();
}

void set_max_threads(int n) { g_override.store(n, std::memory_order_relaxed); }

void parallel_for_ranges(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (count <= 0) return;
    const int nthreads = static_cast<int>(std::min<std::int64_t>(max_threads(), count));
    if (nthreads <= 1) {
        fn(0, count);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    const std::int64_t chunk = (count + nthreads - 1) / nthreads;
    for (int t = 0; t < nthreads; ++t) {
        const std::int64_t begin = t * chunk;
        const std::int64_t end = std::min<std::int64_t>(begin + chunk, count);
        if (begin >= end) break;
        workers.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& w : workers) w.join();
}

void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
    parallel_for_ranges(count, [&fn](std::int64_t begin, std::int64_t end) {
        for (std::int64_t i = begin; i < end; ++i) fn(i);
    });
}

} // namespace fpx
