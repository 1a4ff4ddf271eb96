#pragma once

#include <functional>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "isamp/outcome_model.hpp"
#include "isamp/quadrature.hpp"

namespace isamp {

/// Target (a): theta solves E U(theta; X, Y) = 0.
struct EstimatingEquationTarget {
  int q = 1;
  std::function<void(const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                     double y, Eigen::Ref<Eigen::VectorXd> out)>
      U;
};

/// Target (b): theta parameterizes the regression mean mu(x; theta).
struct RegressionMeanTarget {
  int q = 0;
  std::function<double(const Eigen::VectorXd& x, const Eigen::VectorXd& theta)> mu;
  std::function<void(const Eigen::VectorXd& x, const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::VectorXd> out)>
      mu_dot;
};

/// Target (c): theta parameterizes the outcome density f(y|x; theta).
/// `law_nodes` discretizes f(.|x; theta) so E(.|x; theta) integrals can be
/// taken at the current iterate (Gauss-Hermite for location-scale families,
/// exact atoms for discrete ones).
struct OutcomeDensityTarget {
  int q = 0;
  std::function<double(double y, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& theta)>
      logf;
  std::function<void(double y, const Eigen::VectorXd& x, const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::VectorXd> out)>
      score;
  std::function<void(const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                     const QuadratureRule& rule, std::vector<YNode>& out)>
      law_nodes;
  /// Optional bulk form of `score` for hot loops: fills out[k*q + j] for
  /// node k, component j.
  std::function<void(const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                     const double* y, int n, double* out)>
      score_batch;

  void eval_scores(const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                   const double* y, int n, double* out,
                   Eigen::VectorXd& scratch) const {
    if (score_batch) {
      score_batch(theta, x, y, n, out);
      return;
    }
    for (int k = 0; k < n; ++k) {
      score(y[k], x, theta, scratch);
      for (int j = 0; j < q; ++j) out[k * q + j] = scratch[j];
    }
  }
};

using TargetSpec =
    std::variant<EstimatingEquationTarget, RegressionMeanTarget, OutcomeDensityTarget>;

inline int target_dim(const TargetSpec& t) {
  return std::visit([](const auto& v) { return v.q; }, t);
}

/// U(theta; x, y) = theta - y: the population-mean target.
inline EstimatingEquationTarget mean_target() {
  EstimatingEquationTarget t;
  t.q = 1;
  t.U = [](const Eigen::VectorXd& theta, const Eigen::VectorXd&, double y,
           Eigen::Ref<Eigen::VectorXd> out) { out[0] = theta[0] - y; };
  return t;
}

/// mu(x; theta) = theta_0 + theta_1^T x.
inline RegressionMeanTarget linear_regression_target(int xdim) {
  RegressionMeanTarget t;
  t.q = xdim + 1;
  t.mu = [](const Eigen::VectorXd& x, const Eigen::VectorXd& theta) {
    double m = theta[0];
    for (int k = 0; k < static_cast<int>(x.size()); ++k) m += theta[k + 1] * x[k];
    return m;
  };
  t.mu_dot = [](const Eigen::VectorXd& x, const Eigen::VectorXd&,
                Eigen::Ref<Eigen::VectorXd> out) {
    out[0] = 1.0;
    for (int k = 0; k < static_cast<int>(x.size()); ++k) out[k + 1] = x[k];
  };
  return t;
}

/// Y | x ~ N(theta_0 + theta_1^T x, theta_last), theta = (coef..., sigma2).
inline OutcomeDensityTarget normal_linear_outcome_target(int xdim) {
  OutcomeDensityTarget t;
  t.q = xdim + 2;
  auto mean = [xdim](const Eigen::VectorXd& x, const Eigen::VectorXd& theta) {
    double m = theta[0];
    for (int k = 0; k < xdim; ++k) m += theta[k + 1] * x[k];
    return m;
  };
  t.logf = [mean, xdim](double y, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& theta) {
    const double s2 = theta[xdim + 1];
    const double r = y - mean(x, theta);
    return -0.5 * std::log(2.0 * M_PI * s2) - 0.5 * r * r / s2;
  };
  t.score = [mean, xdim](double y, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& theta,
                         Eigen::Ref<Eigen::VectorXd> out) {
    const double s2 = theta[xdim + 1];
    const double r = y - mean(x, theta);
    const double rs = r / s2;
    out[0] = rs;
    for (int k = 0; k < xdim; ++k) out[k + 1] = x[k] * rs;
    out[xdim + 1] = 0.5 * (r * r - s2) / (s2 * s2);
  };
  t.law_nodes = [mean](const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                       const QuadratureRule& rule, std::vector<YNode>& out) {
    const double mu = mean(x, theta);
    const double s = std::sqrt(theta[theta.size() - 1]);
    out.resize(rule.q);
    for (int k = 0; k < rule.q; ++k) {
      out[k].y = mu + s * rule.nodes[k];
      out[k].p = rule.weights[k];
    }
  };
  t.score_batch = [mean, xdim](const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                               const double* y, int n, double* out) {
    const double s2 = theta[xdim + 1];
    const double inv_s2 = 1.0 / s2;
    const double half_inv_s4 = 0.5 * inv_s2 * inv_s2;
    const double mu = mean(x, theta);
    const int q = xdim + 2;
    for (int k = 0; k < n; ++k) {
      const double r = y[k] - mu;
      const double rs = r * inv_s2;
      double* o = out + k * q;
      o[0] = rs;
      for (int c = 0; c < xdim; ++c) o[c + 1] = x[c] * rs;
      o[xdim + 1] = (r * r - s2) * half_inv_s4;
    }
  };
  return t;
}

}  // namespace isamp
