#pragma once

#include <mutex>

namespace ctk::detail {

// The FFTW planner is not thread-safe; plan execution is.
std::mutex& fftw_planner_mutex();

}  // namespace ctk::detail
