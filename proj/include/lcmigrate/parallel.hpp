#pragma once

#include <cstddef>
#include <functional>

namespace lcmigrate {

/// Caps the worker count used by parallel_for. 0 restores the default
/// (hardware concurrency).
void set_max_threads(unsigned n);
unsigned max_threads();

/// Calls fn(i) for every i in [begin, end). Work is split into contiguous
/// blocks; fn must only write to state owned by index i so results do not
/// depend on the thread count.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn);

}  // namespace lcmigrate
