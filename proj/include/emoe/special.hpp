#pragma once
// Scalar special functions used by the Beta KL divergence.

#include <cmath>
#include <string>

#include "emoe/error.hpp"

namespace emoe::special {

inline void require_positive(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError(std::string(fn) + " requires a positive finite argument, got " +
                      std::to_string(x));
  }
}

inline double lgamma(double x) {
  require_positive(x, "lgamma");
  return std::lgamma(x);
}

/// psi(x): recurrence psi(x) = psi(x+1) - 1/x until x >= 6, then the
/// asymptotic expansion in 1/x^2 (Bernoulli coefficients through B18).
inline double digamma(double x) {
  require_positive(x, "digamma");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double r = 1.0 / (x * x);
  const double series =
      r * (1.0 / 12 -
           r * (1.0 / 120 -
                r * (1.0 / 252 -
                     r * (1.0 / 240 -
                          r * (1.0 / 132 -
                               r * (691.0 / 32760 - r * (1.0 / 12 - r * (3617.0 / 8160 - r * (43867.0 / 14364)))))))));
  return acc + std::log(x) - 0.5 / x - series;
}

/// psi'(x), same shift-then-expand scheme.
inline double trigamma(double x) {
  require_positive(x, "trigamma");
  double acc = 0.0;
  while (x < 6.0) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double r = inv * inv;
  const double series =
      inv + 0.5 * r +
      inv * r *
          (1.0 / 6 -
           r * (1.0 / 30 -
                r * (1.0 / 42 -
                     r * (1.0 / 30 -
                          r * (5.0 / 66 - r * (691.0 / 2730 - r * (7.0 / 6 - r * (3617.0 / 510 - r * (43867.0 / 798)))))))));
  return acc + series;
}

}  // namespace emoe::special
