#pragma once

#include <cstddef>
#include <functional>

namespace dblend {

// Worker count from DBLND_THREADS (default 1). Only affects speed: every
// parallel loop writes results by index and reduces in index order.
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Calls fn(i) for i in [0, n). The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dblend
