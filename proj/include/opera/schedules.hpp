// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "opera/util.hpp"

namespace opera {

/// Constants of the dynamic-pruning schedule. Defaults follow the reference
/// configuration: query strengths 2 -> 5 with initial cutoff ratio 0.25,
/// document cutoff 0.25 -> 0.5 with constant strength 5.
struct ScheduleParams {
  double alpha_start = 2.0;  // query sampling strength at t = 0, > 1
  double alpha_end = 5.0;    // query sampling strength at t = t_max, > 1
  double ratio_start = 0.25; // initial query cutoff ratio r_s, in (0,1]
  double beta_start = 5.0;   // document sampling strength, >= 1
  double beta_end = 5.0;
  double cutoff_start = 0.25;  // document cutoff ratio v at t = 0, in [0,1]
  double cutoff_end = 0.5;
  std::int64_t t_max = 1;
  std::int64_t update_interval = 100;  // steps between query-score refreshes

  void validate() const {
    if (!(alpha_start > 1.0) || !(alpha_end > 1.0)) {
      throw std::invalid_argument("query sampling strengths must be > 1");
    }
    if (!(beta_start >= 1.0) || !(beta_end >= 1.0)) {
      throw std::invalid_argument("document sampling strengths must be >= 1");
    }
    if (!(ratio_start > 0.0 && ratio_start <= 1.0)) {
      throw std::invalid_argument("query cutoff ratio must be in (0,1]");
    }
    if (!(cutoff_start >= 0.0 && cutoff_start <= 1.0) ||
        !(cutoff_end >= 0.0 && cutoff_end <= 1.0)) {
      throw std::invalid_argument("document cutoff ratios must be in [0,1]");
    }
    if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
    if (update_interval < 1) throw std::invalid_argument("update interval must be >= 1");
  }
};

// Half-cosine interpolation from `start` at t = 0 to `end` at t = t_max.
// Steps beyond t_max clamp to the end value (with a one-time warning).
inline double cosine_schedule(double start, double end, std::int64_t t, std::int64_t t_max) {
  if (t < 0) throw std::invalid_argument("schedule step must be >= 0");
  if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
  if (t > t_max) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
      warn("schedule step " + std::to_string(t) + " beyond t_max " + std::to_string(t_max) +
           "; clamping");
    }
    t = t_max;
  }
  double phase = static_cast<double>(t) / static_cast<double>(t_max);
  return end + (1.0 + std::cos(phase * 3.14159265358979323846)) * (start - end) / 2.0;
}

// Fixed virtual dataset size n0 = floor(n*(1 - r_s)/alpha_s + r_s*n).
// Computed once per run; keeps the sampler compatible with fixed-iteration
// training loops.
inline std::size_t virtual_size(std::size_t n, double ratio_start, double alpha_start) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (!(alpha_start > 1.0)) throw std::invalid_argument("alpha_start must be > 1");
  if (!(ratio_start > 0.0 && ratio_start <= 1.0)) {
    throw std::invalid_argument("ratio_start must be in (0,1]");
  }
  double dn = static_cast<double>(n);
  auto n0 = static_cast<std::size_t>(std::floor(dn * (1.0 - ratio_start) / alpha_start + ratio_start * dn));
  if (n0 == 0) throw std::invalid_argument("degenerate schedule: virtual dataset size is 0");
  return std::min(n0, n);
}

// Fraction of queries treated as high quality at strength alpha:
// r = (alpha*n0 - n) / ((alpha - 1)*n), clamped into [0, n0/n].
inline double top_ratio(double alpha, std::size_t n0, std::size_t n) {
  if (!(alpha > 1.0)) throw std::invalid_argument("alpha must be > 1");
  if (n == 0) throw std::invalid_argument("n must be >= 1");
  double dn = static_cast<double>(n);
  double dn0 = static_cast<double>(n0);
  double r = (alpha * dn0 - dn) / ((alpha - 1.0) * dn);
  double hi = dn0 / dn;
  if (r < 0.0) return 0.0;
  if (r > hi) return hi;
  return r;
}

}  // namespace opera
