#pragma once

#include <cstddef>
#include <functional>

namespace swarmfuse {

/// Flushes denormal floats to zero on this thread while alive. Peaked
/// softmax fibers otherwise fill later convolutions with denormals, which
/// are orders of magnitude slower on x86. Threads started inside inherit it.
class FlushDenormalsGuard {
 public:
  FlushDenormalsGuard();
  ~FlushDenormalsGuard();
  FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
  FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

 private:
  unsigned previous_ = 0;
};

/// Worker threads to use: SWARMFUSE_THREADS if set (>= 1), else the hardware count.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index runs
/// exactly once; the first exception thrown is rethrown after all workers stop.
/// Graph recording is disabled inside workers whenever it is disabled in the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace swarmfuse
