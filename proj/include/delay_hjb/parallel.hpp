#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace delay_hjb {

// Thread count used by batch operations. 0 means "not set": the value of
// DELAY_HJB_THREADS is used if present, otherwise hardware concurrency.
void set_thread_count(int threads);
int thread_count();

// Runs fn(i) for i in [0, count) over contiguous chunks. fn must only write to
// slots owned by index i; callers reduce afterwards in index order, so results
// do not depend on the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

// Stream seed for (seed, stream) pairs; splitmix64 finalizer over both words.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace delay_hjb
