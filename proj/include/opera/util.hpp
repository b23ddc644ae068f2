// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <functional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>
#include <iostream>

namespace opera {

// Process-wide warning sink. Tests may swap it to capture messages.
inline std::function<void(std::string_view)>& warning_handler() {
  static std::function<void(std::string_view)> handler =
      [](std::string_view msg) { std::cerr << "[opera] warning: " << msg << "\n"; };
  return handler;
}

inline void warn(std::string_view msg) { warning_handler()(msg); }

// Resolves a worker count from the request, the OPERA_PRUNE_THREADS cap and
// the hardware. A request of <= 0 means "as many as allowed".
inline unsigned resolve_jobs(int requested) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  unsigned jobs = requested > 0 ? static_cast<unsigned>(requested) : hw;
  if (const char* cap = std::getenv("OPERA_PRUNE_THREADS")) {
    long v = std::strtol(cap, nullptr, 10);
    if (v >= 1 && static_cast<unsigned>(v) < jobs) jobs = static_cast<unsigned>(v);
  }
  return jobs < 1 ? 1u : jobs;
}

// Runs fn(begin, end) over contiguous chunks of [0, n). Results must be
// written to disjoint, preallocated slots so the outcome is independent of
// the thread count.
inline void parallel_for(std::size_t n, unsigned jobs,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  if (jobs <= 1 || n < 2 * jobs) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  std::size_t chunk = (n + jobs - 1) / jobs;
  for (unsigned w = 0; w < jobs; ++w) {
    std::size_t begin = static_cast<std::size_t>(w) * chunk;
    if (begin >= n) break;
    std::size_t end = std::min(n, begin + chunk);
    workers.emplace_back(fn, begin, end);
  }
  for (auto& t : workers) t.join();
}

}  // namespace opera
