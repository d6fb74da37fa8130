// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace mergeforge {

namespace {

constexpr std::int64_t kMinChunk = 1 << 16;

int default_threads() noexcept {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> gThreads{default_threads()};

} // namespace

int thread_count() noexcept { return gThreads.load(std::memory_order_relaxed); }

void set_thread_count(int threads) noexcept {
    gThreads.store(threads < 1 ? 1 : threads, std::memory_order_relaxed);
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0)
        return;
    const std::int64_t workers = std::min<std::int64_t>(thread_count(), (n + kMinChunk - 1) / kMinChunk);
    if (workers <= 1) {
        body(0, n);
        return;
    }
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers - 1));
    auto run = [&](std::int64_t w) {
        try {
            const std::int64_t begin = w * chunk;
            body(begin, std::min(n, begin + chunk));
        } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
    };
    for (std::int64_t w = 1; w < workers; ++w)
        pool.emplace_back(run, w);
    run(0);
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

} // namespace mergeforge
