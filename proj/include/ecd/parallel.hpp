// Minimal fork-join helper. Callers write results into per-index slots and
// reduce them in index order, so output never depends on the worker count.
#pragma once

#include <cstddef>
#include <functional>

namespace ecd {

// ECD_NUM_WORKERS when set to a positive integer, else the hardware
// concurrency (at least 1).
unsigned worker_count();

// Runs fn(i) for every i in [0, n); rethrows the first exception.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ecd
