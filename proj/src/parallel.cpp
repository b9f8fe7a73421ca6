#include "tcl/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace tcl {

namespace {
thread_local bool g_inside_worker = false;
}

struct ThreadPool::Impl {
    std::vector<std::thread> workers;
    std::mutex mu;
    std::condition_variable cv_work;
    std::condition_variable cv_done;
    const std::function<void(std::size_t, std::size_t)>* body = nullptr;
    std::size_t job_n = 0;
    std::uint64_t generation = 0;
    std::size_t pending = 0;
    bool stopping = false;
    std::size_t nthreads = 1;

    void worker_main(std::size_t wid) {
        g_inside_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* fn;
            std::size_t n;
            {
                std::unique_lock<std::mutex> lk(mu);
                cv_work.wait(lk, [&] { return stopping || generation != seen; });
                if (stopping) return;
                seen = generation;
                fn = body;
                n = job_n;
            }
            run_chunk(*fn, n, wid);
            {
                std::lock_guard<std::mutex> lk(mu);
                if (--pending == 0) cv_done.notify_one();
            }
        }
    }

    void run_chunk(const std::function<void(std::size_t, std::size_t)>& fn, std::size_t n,
                   std::size_t wid) {
        const std::size_t lo = wid * n / nthreads;
        const std::size_t hi = (wid + 1) * n / nthreads;
        if (lo < hi) fn(lo, hi);
    }

    void resize(std::size_t n) {
        shutdown();
        stopping = false;
        nthreads = std::max<std::size_t>(1, n);
        // worker 0's chunk is executed by the calling thread
        for (std::size_t w = 1; w < nthreads; ++w)
            workers.emplace_back([this, w] { worker_main(w); });
    }

    void shutdown() {
        {
            std::lock_guard<std::mutex> lk(mu);
            stopping = true;
        }
        cv_work.notify_all();
        for (auto& t : workers) t.join();
        workers.clear();
    }
};

ThreadPool::ThreadPool() : impl_(new Impl) {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    impl_->resize(std::min<std::size_t>(hw, 16));
}

ThreadPool::~ThreadPool() {
    impl_->shutdown();
    delete impl_;
}

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

void ThreadPool::set_threads(std::size_t n) {
    if (n == 0) {
        n = std::thread::hardware_concurrency();
        if (n == 0) n = 1;
        n = std::min<std::size_t>(n, 16);
    }
    if (n == impl_->nthreads) return;
    impl_->resize(n);
}

std::size_t ThreadPool::threads() const { return impl_->nthreads; }

void ThreadPool::parallel_for(std::size_t n,
                              const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    // nested calls and tiny jobs run inline
    if (g_inside_worker || impl_->nthreads == 1 || n < 2) {
        body(0, n);
        return;
    }
    {
        std::lock_guard<std::mutex> lk(impl_->mu);
        impl_->body = &body;
        impl_->job_n = n;
        impl_->pending = impl_->nthreads - 1;
        ++impl_->generation;
    }
    impl_->cv_work.notify_all();
    impl_->run_chunk(body, n, 0);
    std::unique_lock<std::mutex> lk(impl_->mu);
    impl_->cv_done.wait(lk, [&] { return impl_->pending == 0; });
}

} // namespace tcl
