#pragma once

#include <cstdint>
#include <functional>

namespace vdyn {

/// Number of worker threads used by parallel_for (default: hardware concurrency,
/// overridable via set_thread_count or the VDYN_THREADS environment variable).
int thread_count();
void set_thread_count(int n);

/// Runs fn(begin, end) over a static contiguous partition of [0, n).
/// Work is assigned by range, never by work stealing, so any value written by
/// exactly one range index is bit-reproducible for every thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace vdyn
