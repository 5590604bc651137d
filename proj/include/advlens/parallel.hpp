#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>

#include "advlens/kernels.hpp"

namespace advlens {

/// Calls f(begin, end) for consecutive fixed-size ranges of [0, n), in
/// parallel when OpenMP has threads to spare. Chunk boundaries depend only on
/// n and chunk, so per-chunk work sees the same inputs at any thread count.
/// The first exception thrown by any chunk is rethrown.
template <class F>
void for_each_chunk(std::size_t n, std::size_t chunk, F&& f) {
    if (n == 0) return;
    const std::size_t chunks = (n + chunk - 1) / chunk;
    const bool parallel = chunks > 1 && kernels::max_threads() > 1 && !kernels::in_parallel();
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
        const std::size_t begin = static_cast<std::size_t>(c) * chunk;
        try {
            f(begin, std::min(n, begin + chunk));
        } catch (...) {
#pragma omp critical(advlens_chunk_error)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
}

}  // namespace advlens
