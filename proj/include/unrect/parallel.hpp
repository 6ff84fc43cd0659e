#pragma once

#include <cstddef>
#include <functional>

namespace unrect {

/// Worker count: UNRECT_THREADS if set (>= 1), else hardware concurrency.
unsigned worker_count();

/// Calls body(i) for i in [0, n). Each index is visited exactly once; bodies
/// must write to disjoint outputs. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace unrect
