#pragma once

#include <cstddef>
#include <functional>

namespace tardis {

// Worker count: TARDIS_THREADS if set, else hardware concurrency (>= 1).
std::size_t worker_count();

// Runs body(begin, end) over a static partition of [0, n). The partition is
// a function of n and the worker count only; callers that need bitwise
// determinism must write disjoint outputs and reduce in a fixed order.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

} // namespace tardis
