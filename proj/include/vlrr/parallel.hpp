#pragma once

#include <cstddef>
#include <functional>

namespace vlrr {

// Worker count used by the compute kernels. Defaults to 1; the CLI reads
// VLRR_THREADS. Kernels only split work across independent output elements,
// so results are bit-identical for every thread count.
std::size_t thread_count() noexcept;
void set_thread_count(std::size_t n) noexcept;

// Reads VLRR_THREADS (if set and valid) into the thread count.
void configure_threads_from_env();

// Calls body(i) for every i in [0, n), partitioned into contiguous chunks.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

} // namespace vlrr
