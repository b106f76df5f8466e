#include "sfe/ops.hpp"

#include <atomic>
#include <thread>

namespace sfe::ops {

namespace {
thread_local OpStats g_stats;
std::atomic<int> g_threads{1};
}

OpStats& op_stats() { return g_stats; }

void reset_op_stats() { g_stats = OpStats{}; }

void set_compute_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  g_threads.store(n, std::memory_order_relaxed);
  // The BLAS pool spin-waits between calls and starves the engine workers;
  // chunk-level parallelism owns the cores instead.
  blas::set_num_threads(1);
}

int compute_threads() { return g_threads.load(std::memory_order_relaxed); }

}  // namespace sfe::ops
