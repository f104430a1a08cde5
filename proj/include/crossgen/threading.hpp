#pragma once

#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace crossgen {

// Static-partition parallel loop. Work item i is always processed whole by
// one thread; callers that need determinism must make item results order-
// independent (they are merged by the caller in index order).
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = int(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (int64_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace crossgen
