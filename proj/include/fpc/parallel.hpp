// Minimal persistent thread pool for data-parallel loops.
#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "fpc/common.hpp"

namespace fpc {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // Runs fn(begin, end) over a fixed partition of [0, n) into chunks.
  // The partition depends only on n and the worker count, and every index
  // is processed by exactly one invocation.
  void run_chunks(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    int workers = runtime::thread_count();
    if (n <= 0) return;
    if (workers <= 1 || n < 2 * kMinChunk) {
      fn(0, n);
      return;
    }
    ensure_threads(workers - 1);
    std::int64_t chunk = (n + workers - 1) / workers;
    if (chunk < kMinChunk) chunk = kMinChunk;
    int used = static_cast<int>((n + chunk - 1) / chunk);

    {
      std::unique_lock<std::mutex> lock(mu_);
      job_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      next_chunk_ = 1;  // chunk 0 runs on the calling thread
      pending_ = used - 1;
      ++generation_;
      wake_.notify_all();
    }

    fn(0, std::min<std::int64_t>(chunk, n));

    std::unique_lock<std::mutex> lock(mu_);
    done_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
      wake_.notify_all();
    }
    for (auto& t : threads_) t.join();
  }

 private:
  static constexpr std::int64_t kMinChunk = 256;

  ThreadPool() = default;

  void ensure_threads(int n) {
    std::unique_lock<std::mutex> lock(mu_);
    while (static_cast<int>(threads_.size()) < n) {
      threads_.emplace_back([this] { worker(); });
    }
  }

  void worker() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t, std::int64_t)>* job = nullptr;
      std::int64_t n = 0, chunk = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
        n = job_n_;
        chunk = job_chunk_;
      }
      if (!job) continue;
      for (;;) {
        std::int64_t c;
        {
          std::unique_lock<std::mutex> lock(mu_);
          // generation_ only advances once every chunk of this job is done,
          // so a stale worker can never claim chunks of a newer job.
          if (generation_ != seen || next_chunk_ * chunk >= n) break;
          c = next_chunk_++;
        }
        (*job)(c * chunk, std::min<std::int64_t>((c + 1) * chunk, n));
        std::unique_lock<std::mutex> lock(mu_);
        if (--pending_ == 0) done_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable wake_, done_;
  std::vector<std::thread> threads_;
  const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
  std::int64_t job_n_ = 0, job_chunk_ = 0, next_chunk_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Parallel loop over [0, n); fn must write disjoint outputs per index.
inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  ThreadPool::instance().run_chunks(n, fn);
}

}  // namespace fpc
