#include "dblend/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dblend {

namespace {

std::atomic<std::size_t> override_threads{0};

std::size_t env_threads() {
    static const std::size_t n = [] {
        const char* v = std::getenv("DBLND_THREADS");
        if (!v || !*v) return std::size_t(1);
        char* end = nullptr;
        const long x = std::strtol(v, &end, 10);
        return (end && *end == '\0' && x > 0) ? std::size_t(x) : std::size_t(1);
    }();
    return n;
}

}  // namespace

std::size_t thread_count() {
    const std::size_t o = override_threads.load();
    return o ? o : env_threads();
}

void set_thread_count(std::size_t n) { override_threads.store(n); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    auto run = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!first) first = std::current_exception();
                next.store(n);
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

}  // namespace dblend
