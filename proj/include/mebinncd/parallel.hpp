#pragma once

#include <exception>
#include <mutex>

#include "mebinncd/mebin.hpp"

namespace mebinncd {

/// Runs fn(i) for i in [0, n). Under Exec::Parallel the iterations are spread
/// over OpenMP threads; the first exception thrown by any iteration is
/// rethrown on the calling thread.
template <typename Fn>
void parallel_for(int n, Exec exec, Fn&& fn) {
    if (exec == Exec::Serial) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex guard;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        try {
            fn(i);
        } catch (...) {
            std::lock_guard lock(guard);
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
}

/// Sets the OpenMP team size when jobs > 0.
void set_jobs(int jobs);
int max_jobs();

}  // namespace mebinncd
