#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace hiercontrol {

/// Worker count: HIERCONTROL_THREADS if set, else hardware concurrency.
inline int worker_count() {
    if (const char* env = std::getenv("HIERCONTROL_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Run body(i) for i in [0, n). Each index writes only its own slot, so the
/// result does not depend on scheduling. The exception of the lowest failing
/// index is rethrown.
template <class Body>
void parallel_for(int n, Body body, int workers = worker_count()) {
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    errs[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

}  // namespace hiercontrol
