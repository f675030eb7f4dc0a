#pragma once

#include <cstddef>
#include <functional>

namespace mixttt {

// Worker cap: MIXTTT_THREADS when set, hardware concurrency otherwise.
std::size_t max_threads();

// Runs fn(0..n-1) across a worker pool. Callers write results into
// index-addressed slots, so output is independent of scheduling. The first
// exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mixttt
