#pragma once

#include <cstddef>
#include <functional>

namespace gmmcv {

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled exactly once; callers write into per-index slots, so results do
/// not depend on the schedule. The exception of the lowest failing index is
/// rethrown after all workers finish.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace gmmcv
