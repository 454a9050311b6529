#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace dkvb::detail {

// Runs fn(i) for i in [0, n) over `workers` threads in contiguous chunks.
// Callers must write only to per-index slots; results are then independent of
// the worker count.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned used = static_cast<unsigned>(
        std::min<std::size_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(used);
    const std::size_t chunk = (n + used - 1) / used;
    for (unsigned w = 0; w < used; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace dkvb::detail
