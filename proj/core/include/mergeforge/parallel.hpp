// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>

namespace mergeforge {

/// Worker count used by element-parallel kernels (>= 1). Defaults to the
/// number of hardware threads.
int thread_count() noexcept;
void set_thread_count(int threads) noexcept;

/// Calls body(begin, end) over disjoint chunks covering [0, n). Chunks run on
/// up to thread_count() threads; each element is visited exactly once, so
/// elementwise kernels give identical results for any thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

} // namespace mergeforge
