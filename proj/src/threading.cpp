#include "vdyn/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace vdyn {

namespace {

int default_threads() {
    if (const char* env = std::getenv("VDYN_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> g_threads{0};

// Persistent pool; parallel_for is called thousands of times per training step,
// so spawning threads per call would dominate.
class Pool {
public:
    explicit Pool(int workers) : stop_(false), job_id_(0), done_count_(0) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(int64_t n, int parts, const std::function<void(int64_t, int64_t)>& fn) {
        {
            std::unique_lock<std::mutex> lk(mu_);
            fn_ = &fn;
            n_ = n;
            parts_ = parts;
            done_count_ = 0;
            ++job_id_;
        }
        cv_.notify_all();
        run_part(n, parts, 0, fn);  // caller acts as worker 0
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return done_count_ == static_cast<int>(threads_.size()); });
        fn_ = nullptr;
    }

private:
    static void run_part(int64_t n, int parts, int part, const std::function<void(int64_t, int64_t)>& fn) {
        int64_t chunk = (n + parts - 1) / parts;
        int64_t begin = chunk * part;
        int64_t end = std::min<int64_t>(n, begin + chunk);
        if (begin < end) fn(begin, end);
    }

    void worker_loop(int index) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int64_t, int64_t)>* fn = nullptr;
            int64_t n = 0;
            int parts = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || job_id_ != seen; });
                if (stop_) return;
                seen = job_id_;
                fn = fn_;
                n = n_;
                parts = parts_;
            }
            if (fn) run_part(n, parts, index, *fn);
            {
                std::unique_lock<std::mutex> lk(mu_);
                ++done_count_;
            }
            done_cv_.notify_one();
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> threads_;
    bool stop_;
    uint64_t job_id_;
    int done_count_;
    const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
    int64_t n_ = 0;
    int parts_ = 0;
};

Pool* pool_for(int workers) {
    static Pool* pool = nullptr;
    static int pool_workers = -1;
    if (pool == nullptr || pool_workers != workers) {
        delete pool;
        pool = new Pool(workers);
        pool_workers = workers;
    }
    return pool;
}

std::mutex g_pool_mu;

}  // namespace

int thread_count() {
    int n = g_threads.load();
    if (n == 0) {
        n = default_threads();
        g_threads.store(n);
    }
    return n;
}

void set_thread_count(int n) {
    g_threads.store(n < 1 ? 1 : n);
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int threads = thread_count();
    if (threads <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    static std::mutex run_mu;
    std::unique_lock<std::mutex> run_lk(run_mu, std::try_to_lock);
    if (!run_lk.owns_lock()) {
        // Nested parallel region: run serially, the outer call owns the pool.
        fn(0, n);
        return;
    }
    std::unique_lock<std::mutex> lk(g_pool_mu);
    Pool* pool = pool_for(threads - 1);
    lk.unlock();
    pool->run(n, threads, fn);
}

}  // namespace vdyn
