#pragma once

#include <cstddef>
#include <functional>

namespace spectral::detail {

// Runs job(i) for i in [0, count) on up to harness_threads() workers.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job);

}  // namespace spectral::detail
