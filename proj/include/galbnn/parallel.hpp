#pragma once

#include <cstddef>
#include <functional>

namespace galbnn {

/// Worker cap: GALBNN_THREADS if set (>= 1), else hardware concurrency.
unsigned thread_count();

/// Runs fn(i) for i in [0, n) across thread_count() workers with static
/// contiguous chunks. fn must only write to per-index state; the first
/// exception thrown by any worker is rethrown on the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace galbnn
