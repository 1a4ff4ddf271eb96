#pragma once

#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "isamp/errors.hpp"

namespace isamp {

inline double logistic(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("logit: argument outside (0,1)");
  return std::log(p / (1.0 - p));
}

/// log of 1 + exp(t), overflow-safe.
inline double log1pexp(double t) {
  if (t > 35.0) return t;
  if (t < -35.0) return std::exp(t);
  return std::log1p(std::exp(t));
}

inline double log_beta(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("log_beta: arguments must be positive");
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

inline double digamma(double x) { return boost::math::digamma(x); }

}  // namespace isamp
