#include "swarmfuse/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "swarmfuse/tensor.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace swarmfuse {

#if defined(__SSE__)
FlushDenormalsGuard::FlushDenormalsGuard() : previous_(_mm_getcsr()) {
  _mm_setcsr(previous_ | 0x8040u);  // FTZ | DAZ
}
FlushDenormalsGuard::~FlushDenormalsGuard() { _mm_setcsr(previous_); }
#else
FlushDenormalsGuard::FlushDenormalsGuard() = default;
FlushDenormalsGuard::~FlushDenormalsGuard() = default;
#endif

std::size_t worker_count() {
  if (const char* env = std::getenv("SWARMFUSE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min(worker_count(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const bool record = grad_enabled();
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    std::optional<NoGradGuard> guard;
    if (!record) guard.emplace();
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace swarmfuse
