#include "vlrr/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace vlrr {

namespace {
std::atomic<std::size_t> g_threads{1};
}

std::size_t thread_count() noexcept { return g_threads.load(std::memory_order_relaxed); }

void set_thread_count(std::size_t n) noexcept { g_threads.store(std::max<std::size_t>(n, 1), std::memory_order_relaxed); }

void configure_threads_from_env() {
    if (const char* env = std::getenv("VLRR_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) {
                set_thread_count(static_cast<std::size_t>(v));
            }
        } catch (const std::exception&) {
            // Unparsable values leave the default in place.
        }
    }
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    auto run = [&](std::size_t w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) {
            body(i);
        }
    };
    for (std::size_t w = 1; w < workers; ++w) {
        pool.emplace_back(run, w);
    }
    run(0);
    for (auto& t : pool) {
        t.join();
    }
}

} // namespace vlrr
