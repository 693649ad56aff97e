#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace introspect::util {

/// Number of workers used by parallel_map; at least 1.
inline unsigned worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Calls fn(i) for i in [0, n) on a small worker pool and returns the results
/// in index order. fn must only read shared state. The first exception thrown
/// by any call is rethrown after all workers stop.
template <typename Fn>
auto parallel_map(std::size_t n, Fn&& fn, unsigned workers = worker_count()) {
    using R = decltype(fn(std::size_t{0}));
    std::vector<R> out(n);
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                out[i] = fn(i);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    pool.clear();
    if (error) std::rethrow_exception(error);
    return out;
}

}  // namespace introspect::util
