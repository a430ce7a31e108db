#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace mtp {

inline int default_threads() {
    const unsigned h = std::thread::hardware_concurrency();
    return h ? static_cast<int>(h) : 1;
}

// Runs fn(0..n-1) across up to `threads` workers. Callers keep determinism by
// writing only to per-index slots; combining results stays the caller's job
// and must happen in index order.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    if (threads > n) threads = n;
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        workers.emplace_back([&, w] {
            try {
                while (true) {
                    const int i = next.fetch_add(1);
                    if (i >= n) break;
                    fn(i);
                }
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
                next.store(n);
            }
        });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace mtp
