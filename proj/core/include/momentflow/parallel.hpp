#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace momentflow {

/// Runs fn(i) for i in [0, n) across `threads` workers on disjoint index
/// blocks. Results must go to per-index slots; with threads <= 1 this is a
/// plain loop. Output is identical for any thread count.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (std::thread& t : pool) t.join();
}

}  // namespace momentflow
