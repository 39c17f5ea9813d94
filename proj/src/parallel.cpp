#include "vmaseg/parallel.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vmaseg {

namespace {
std::atomic<int> g_workers{0};
}

int worker_count() {
  const int w = g_workers.load();
  if (w > 0) return w;
#ifdef _OPENMP
  return std::max(1, omp_get_max_threads());
#else
  return 1;
#endif
}

void set_worker_count(int workers) { g_workers.store(std::max(1, workers)); }

bool in_parallel_region() {
#ifdef _OPENMP
  return omp_in_parallel() != 0;
#else
  return false;
#endif
}

namespace detail {

void parallel_for_impl(std::int64_t count, void (*thunk)(void*, std::int64_t), void* ctx) {
#ifdef _OPENMP
  const int workers = worker_count();
  if (workers > 1 && count > 1 && !in_parallel_region()) {
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
    for (std::int64_t i = 0; i < count; ++i) thunk(ctx, i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < count; ++i) thunk(ctx, i);
}

}  // namespace detail
}  // namespace vmaseg
