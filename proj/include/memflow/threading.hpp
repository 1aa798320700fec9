#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace memflow {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs fn(begin, end) over fixed contiguous chunks of [0, n). The partition
/// depends only on (n, threads), chunks write to disjoint state, and the
/// lowest-index exception wins, so results never depend on scheduling.
template <typename Fn>
void parallel_for(long n, int threads, Fn&& fn) {
    threads = resolve_threads(threads);
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        fn(0L, n);
        return;
    }
    int used = static_cast<int>(std::min<long>(threads, n));
    long chunk = (n + used - 1) / used;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(used));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(used));
    for (int w = 0; w < used; ++w) {
        long begin = static_cast<long>(w) * chunk;
        long end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&, w, begin, end]() {
            try {
                fn(begin, end);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace memflow
