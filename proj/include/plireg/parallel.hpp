#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace plireg {

// Process-wide worker pool. Work is split into contiguous index blocks so
// results never depend on the thread count; reductions must combine
// per-block partials in block order.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return n_threads_; }

    // Resize is cheap; intended for tests and CLI --workers.
    void set_size(int n) {
        std::lock_guard<std::mutex> lk(resize_mutex_);
        n = std::max(1, n);
        if (n == n_threads_) return;
        stop_workers();
        start_workers(n);
    }

    // fn(block_index, begin, end) over [0,n) split into n_blocks pieces.
    void run_blocks(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn) {
        if (n == 0) return;
        std::lock_guard<std::mutex> lk(resize_mutex_);
        const int blocks = static_cast<int>(std::min<std::size_t>(n_threads_, n));
        if (blocks <= 1) {
            fn(0, 0, n);
            return;
        }
        const std::size_t chunk = (n + blocks - 1) / blocks;
        std::atomic<int> remaining(blocks);
        std::mutex done_m;
        std::condition_variable done_cv;
        {
            std::lock_guard<std::mutex> qlk(queue_mutex_);
            for (int b = 0; b < blocks; ++b) {
                const std::size_t lo = b * chunk;
                const std::size_t hi = std::min(n, lo + chunk);
                tasks_.push_back([&fn, &remaining, &done_m, &done_cv, b, lo, hi] {
                    fn(b, lo, hi);
                    if (remaining.fetch_sub(1) == 1) {
                        std::lock_guard<std::mutex> dlk(done_m);
                        done_cv.notify_all();
                    }
                });
            }
        }
        queue_cv_.notify_all();
        std::unique_lock<std::mutex> dlk(done_m);
        done_cv.wait(dlk, [&] { return remaining.load() == 0; });
    }

private:
    ThreadPool() { start_workers(static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))); }
    ~ThreadPool() { stop_workers(); }

    void start_workers(int n) {
        n_threads_ = n;
        stop_ = false;
        for (int i = 0; i < n; ++i) {
            workers_.emplace_back([this] {
                for (;;) {
                    std::function<void()> task;
                    {
                        std::unique_lock<std::mutex> lk(queue_mutex_);
                        queue_cv_.wait(lk, [this] { return stop_ || !tasks_.empty(); });
                        if (stop_ && tasks_.empty()) return;
                        task = std::move(tasks_.front());
                        tasks_.erase(tasks_.begin());
                    }
                    task();
                }
            });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lk(queue_mutex_);
            stop_ = true;
        }
        queue_cv_.notify_all();
        for (auto& w : workers_) w.join();
        workers_.clear();
    }

    std::vector<std::thread> workers_;
    std::vector<std::function<void()>> tasks_;
    std::mutex queue_mutex_;
    std::mutex resize_mutex_;
    std::condition_variable queue_cv_;
    bool stop_ = false;
    int n_threads_ = 1;
};

// Parallel loop over [0,n). Body must only write disjoint outputs.
template <class Fn>
inline void parallel_for(std::size_t n, Fn&& body) {
    ThreadPool::instance().run_blocks(n, [&](int, std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) body(i);
    });
}

// Deterministic parallel reduction: per-block partial sums combined in
// block order, independent of thread count.
template <class Fn>
inline double parallel_sum(std::size_t n, Fn&& term) {
    auto& pool = ThreadPool::instance();
    std::vector<double> partials(std::max<std::size_t>(1, std::min<std::size_t>(pool.size(), n)), 0.0);
    pool.run_blocks(n, [&](int block, std::size_t lo, std::size_t hi) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += term(i);
        partials[block] = acc;
    });
    double total = 0.0;
    for (double p : partials) total += p;
    return total;
}

}  // namespace plireg
