// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

namespace opera {

inline void check_same_dim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dimension mismatch: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  check_same_dim(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void scale(std::span<double> a, double s) {
  for (double& x : a) x *= s;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  check_same_dim(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void normalize(std::span<double> a) {
  double n = norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw std::domain_error("cannot normalize a zero or non-finite vector");
  }
  scale(a, 1.0 / n);
}

// Dot product of two unit vectors; symmetric, in [-1, 1] up to rounding.
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  return dot(a, b);
}

}  // namespace opera
