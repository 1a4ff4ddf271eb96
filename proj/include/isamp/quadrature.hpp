#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "isamp/errors.hpp"

namespace isamp {

/// Probabilists' Gauss-Hermite rule: sum_k weights[k] * f(nodes[k])
/// approximates E f(Z) for Z ~ N(0,1), exact for polynomials of degree
/// <= 2Q-1. Weights are normalized so they sum to exactly 1.
struct QuadratureRule {
  int q = 0;
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

// Orthonormal Hermite he_n(x) and he_{n-1}(x) by upward recurrence.
inline void hermite_pair(int n, double x, double* hn, double* hnm1) {
  double h0 = 1.0, h1 = x;  // he_0, he_1
  if (n == 0) {
    *hn = h0;
    *hnm1 = 0.0;
    return;
  }
  for (int k = 1; k < n; ++k) {
    const double h2 = (x * h1 - std::sqrt(static_cast<double>(k)) * h0) /
                      std::sqrt(static_cast<double>(k + 1));
    h0 = h1;
    h1 = h2;
  }
  *hn = h1;
  *hnm1 = h0;
}

}  // namespace detail

inline QuadratureRule gauss_hermite(int q) {
  if (q < 1) throw DomainError("gauss_hermite: node count must be >= 1");
  QuadratureRule rule;
  rule.q = q;
  rule.nodes.resize(q);
  rule.weights.resize(q);
  if (q == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = 1.0;
    return rule;
  }

  // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite family.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(q);
  Eigen::VectorXd sub(q - 1);
  for (int k = 1; k < q; ++k) sub[k - 1] = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  Eigen::VectorXd x = es.eigenvalues();

  // Polish roots of he_q with Newton steps; he_q'(x) = sqrt(q) he_{q-1}(x).
  const double sq = std::sqrt(static_cast<double>(q));
  for (int i = 0; i < q; ++i) {
    double xi = x[i];
    for (int it = 0; it < 3; ++it) {
      double hq, hqm1;
      detail::hermite_pair(q, xi, &hq, &hqm1);
      const double step = hq / (sq * hqm1);
      xi -= step;
      if (std::abs(step) < 1e-15 * (1.0 + std::abs(xi))) break;
    }
    x[i] = xi;
  }
  // Enforce symmetry about zero.
  for (int i = 0; i < q / 2; ++i) {
    const double m = 0.5 * (x[i] - x[q - 1 - i]);
    x[i] = m;
    x[q - 1 - i] = -m;
  }
  if (q % 2 == 1) x[q / 2] = 0.0;

  double wsum = 0.0;
  for (int i = 0; i < q; ++i) {
    double hq, hqm1;
    detail::hermite_pair(q, x[i], &hq, &hqm1);
    const double w = 1.0 / (q * hqm1 * hqm1);
    rule.nodes[i] = x[i];
    rule.weights[i] = w;
    wsum += w;
  }
  for (double& w : rule.weights) w /= wsum;
  return rule;
}

}  // namespace isamp
