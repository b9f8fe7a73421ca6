#pragma once

#include <cstddef>
#include <functional>

namespace tcl {

// Persistent worker pool. parallel_for splits [0, n) into contiguous chunks;
// every index is written by exactly one task, so results are independent of
// the thread count.
class ThreadPool {
public:
    static ThreadPool& instance();

    // n == 0 picks hardware_concurrency (clamped to 16)
    void set_threads(std::size_t n);
    std::size_t threads() const;

    void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

private:
    ThreadPool();
    ~ThreadPool();
    struct Impl;
    Impl* impl_;
};

inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    ThreadPool::instance().parallel_for(n, body);
}

} // namespace tcl
