#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gdf {

// Worker cap: GLYPH_DIFFUSE_THREADS if set, else all cores.
inline int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("GLYPH_DIFFUSE_THREADS")) {
            int n = std::atoi(env);
            if (n >= 1) return n;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? int(hw) : 1;
    }();
    return cached;
}

// Runs fn(begin, end) over a partition of [0, n). Each index is processed by
// exactly one invocation and each invocation computes its outputs with the
// same sequential inner loops regardless of the partition, so results do not
// depend on the thread count.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1) {
    if (n <= 0) return;
    int nt = max_threads();
    std::int64_t max_chunks = (n + grain - 1) / grain;
    nt = int(std::min<std::int64_t>(nt, max_chunks));
    if (nt <= 1) {
        fn(std::int64_t(0), n);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(nt - 1);
    std::int64_t chunk = (n + nt - 1) / nt;
    for (int t = 1; t < nt; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    fn(std::int64_t(0), std::min(n, chunk));
    for (auto& w : workers) w.join();
}

}  // namespace gdf
