#include "brainmt/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace brainmt::parallel {

namespace {

int resolve_default() {
  if (const char* env = std::getenv("BRAINMT_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int g_max_threads = 0;  // 0 = not yet resolved

}  // namespace

int max_threads() {
  if (g_max_threads == 0) g_max_threads = resolve_default();
  return g_max_threads;
}

void set_max_threads(int n) { g_max_threads = std::max(1, n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body,
                  int64_t min_parallel) {
  if (n <= 0) return;
  int nt = max_threads();
  if (nt <= 1 || n < min_parallel) {
    body(0, n);
    return;
  }
  nt = static_cast<int>(std::min<int64_t>(nt, n));
  int64_t chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(nt);
  std::vector<std::exception_ptr> errors(nt);
  for (int i = 0; i < nt; ++i) {
    int64_t b = i * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    workers.emplace_back([&, i, b, e] {
      try {
        body(b, e);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace brainmt::parallel
