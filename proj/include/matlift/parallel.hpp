#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace matlift {

/// Resolves a worker-count request; 0 means "all hardware threads".
inline int resolve_workers(int requested) {
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(chunk, begin, end) over [0, n) split into fixed chunks of `chunk_size`.
/// Chunk boundaries depend only on n and chunk_size, so callers that reduce
/// per-chunk partial results in chunk order get the same bits for any worker count.
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t chunk_size, int workers, Fn &&fn) {
    if (n == 0) return;
    chunk_size = std::max<std::size_t>(1, chunk_size);
    const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
    const int threads = static_cast<int>(std::min<std::size_t>(chunks, static_cast<std::size_t>(resolve_workers(workers))));
    auto run = [&](std::size_t c) { fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size)); };
    if (threads <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) run(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t c; (c = next.fetch_add(1)) < chunks;) {
                try {
                    run(c);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    pool.clear();
    if (error) std::rethrow_exception(error);
}

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) { return (n + chunk_size - 1) / chunk_size; }

} // namespace matlift
