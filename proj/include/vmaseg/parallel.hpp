#pragma once

#include <cstdint>
#include <exception>
#include <mutex>

namespace vmaseg {

/// Worker count used by data-parallel loops (>= 1).
int worker_count();
void set_worker_count(int workers);

/// True when already running inside a parallel region; nested loops then run serially.
bool in_parallel_region();

namespace detail {
void parallel_for_impl(std::int64_t count, void (*thunk)(void*, std::int64_t), void* ctx);
}

/// Runs fn(i) for i in [0, count). Iterations must be independent. The first
/// exception thrown by any iteration is rethrown after the loop.
template <typename F>
void parallel_for(std::int64_t count, F&& fn) {
  struct Ctx {
    F* fn;
    std::exception_ptr error;
    std::mutex mutex;
  } ctx{&fn, nullptr, {}};
  auto thunk = [](void* raw, std::int64_t i) {
    auto* c = static_cast<Ctx*>(raw);
    try {
      (*c->fn)(i);
    } catch (...) {
      std::lock_guard lock(c->mutex);
      if (!c->error) c->error = std::current_exception();
    }
  };
  detail::parallel_for_impl(count, thunk, &ctx);
  if (ctx.error) std::rethrow_exception(ctx.error);
}

}  // namespace vmaseg
