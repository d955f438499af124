#pragma once
// Deterministic fork-join helper. parallel_for splits an index range into
// one contiguous chunk per worker; every output element is written by exactly
// one invocation of the body, so results are identical for any worker count.
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ckptdiff {

// Process-wide worker count (the --jobs flag). 1 = run everything inline.
inline int& job_count() {
  static int n = 1;
  return n;
}
inline void set_jobs(int n) { job_count() = n < 1 ? 1 : n; }

namespace detail {

// True while the current thread is executing a parallel_for body; nested
// parallel_for calls then run inline instead of re-entering the pool.
inline bool& in_parallel() {
  thread_local bool flag = false;
  return flag;
}

// Lazily started pool of job_count()-1 helper threads; the caller works too.
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  // Runs body(t) for t in [1, nworkers) on helpers, body(0) on the caller.
  void run(int nworkers, const std::function<void(int)>& body) {
    ensure(nworkers - 1);
    {
      std::unique_lock lk(m_);
      body_ = &body;
      pending_ = nworkers - 1;
      done_ = 0;
      ++epoch_;
    }
    cv_.notify_all();
    body(0);
    std::unique_lock lk(m_);
    cv_done_.wait(lk, [&] { return done_ == nworkers - 1; });
    body_ = nullptr;
  }

  ~Pool() {
    {
      std::unique_lock lk(m_);
      quit_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

 private:
  Pool() = default;

  void ensure(int helpers) {
    while ((int)threads_.size() < helpers) {
      int id = (int)threads_.size() + 1;
      threads_.emplace_back([this, id] { worker(id); });
    }
  }

  void worker(int id) {
    long seen = 0;
    for (;;) {
      const std::function<void(int)>* body = nullptr;
      {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return quit_ || (epoch_ != seen && body_ && id <= pending_); });
        if (quit_) return;
        seen = epoch_;
        body = body_;
      }
      (*body)(id);
      {
        std::unique_lock lk(m_);
        ++done_;
      }
      cv_done_.notify_one();
    }
  }

  std::mutex m_;
  std::condition_variable cv_, cv_done_;
  std::vector<std::thread> threads_;
  const std::function<void(int)>* body_ = nullptr;
  int pending_ = 0, done_ = 0;
  long epoch_ = 0;
  bool quit_ = false;
};

}  // namespace detail

// Calls fn(i) for every i in [begin, end). Chunk boundaries depend on the
// worker count but each index runs exactly once, so any fn whose writes are
// disjoint per index gives bit-identical results for every --jobs value.
template <class F>
void parallel_for(long begin, long end, F&& fn) {
  long n = end - begin;
  if (n <= 0) return;
  int T = job_count();
  if (T > n) T = (int)n;
  if (T <= 1 || detail::in_parallel()) {
    for (long i = begin; i < end; ++i) fn(i);
    return;
  }
  std::function<void(int)> body = [&](int t) {
    detail::in_parallel() = true;
    long lo = begin + n * t / T, hi = begin + n * (t + 1) / T;
    for (long i = lo; i < hi; ++i) fn(i);
    detail::in_parallel() = false;
  };
  detail::Pool::instance().run(T, body);
}

}  // namespace ckptdiff
