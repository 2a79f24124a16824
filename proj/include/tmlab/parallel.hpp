#pragma once

#include <cstddef>
#include <functional>

namespace tmlab {

// Worker cap from TMLAB_THREADS (default: hardware concurrency, at least 1).
std::size_t worker_threads();

// Process-wide allocator settings suited to repeated large temporaries.
// A no-op outside glibc.
void tune_allocator();

// Calls body(i) for i in [0, n). Each index writes only its own output slot,
// so results do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace tmlab
