#pragma once

#include <cstddef>
#include <functional>

namespace ctk {

/// Process-wide worker count used by parallel_for. Defaults to 1.
void set_threads(int n);
int threads();

/// Runs body(i) for i in [0, n) across up to threads() workers using static
/// contiguous chunks. Nested calls run serially on the calling thread.
/// Callers keep results thread-count independent by writing only to slot i
/// and reducing afterwards in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace ctk
