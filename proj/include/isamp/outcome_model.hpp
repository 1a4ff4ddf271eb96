#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "isamp/data.hpp"
#include "isamp/errors.hpp"
#include "isamp/quadrature.hpp"

namespace isamp {

/// Normal-linear outcome working model: Y | x ~ N(coef^T (1,x), sigma2).
struct NormalLinearWorkingModel {
  Eigen::VectorXd coef;  // intercept first
  double sigma2 = 1.0;

  double mean(const Eigen::VectorXd& x) const {
    double m = coef[0];
    for (int k = 0; k < static_cast<int>(x.size()); ++k) m += coef[k + 1] * x[k];
    return m;
  }

  double sd() const { return std::sqrt(sigma2); }
};

/// One support point of a discretized conditional law of Y given x.
struct YNode {
  double y;
  double p;
};

/// Discretized conditional law of Y given x: fills (y, weight) atoms whose
/// weights sum to 1. Backed by Gauss-Hermite for location-scale working
/// densities, or by exact atoms for discrete laws.
using CondLaw = std::function<void(const Eigen::VectorXd& x, std::vector<YNode>&)>;

inline CondLaw make_normal_law(const NormalLinearWorkingModel& model,
                               const QuadratureRule& rule) {
  return [model, rule](const Eigen::VectorXd& x, std::vector<YNode>& out) {
    const double mu = model.mean(x);
    const double s = model.sd();
    out.resize(rule.q);
    for (int k = 0; k < rule.q; ++k) {
      out[k].y = mu + s * rule.nodes[k];
      out[k].p = rule.weights[k];
    }
  };
}

/// HT-weighted fit of the normal-linear working model: the root of the
/// weighted score equation, available in closed form as weighted least
/// squares with sigma2 = sum dW (y - fit)^2 / sum dW.
inline NormalLinearWorkingModel fit_gamma_ht(const Dataset& d,
                                             bool use_design_weights = true) {
  const int p = d.xdim + 1;
  if (d.n_sampled < p + 1)
    throw EmptySample("fit_gamma_ht: need at least xdim+2 sampled units");
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd xi(p);
  double sw = 0.0;
  for (long i = 0; i < d.n_records; ++i) {
    if (!d.delta[i]) continue;
    const double wi = use_design_weights ? d.w[i] : 1.0;
    xi[0] = 1.0;
    for (int k = 0; k < d.xdim; ++k) xi[k + 1] = d.X(i, k);
    G.noalias() += wi * xi * xi.transpose();
    b.noalias() += wi * d.y[i] * xi;
    sw += wi;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(G);
  lu.setThreshold(1e-10);
  if (lu.rank() < p)
    throw SingularDesign("fit_gamma_ht: weighted Gram matrix is rank-deficient");
  NormalLinearWorkingModel model;
  model.coef = lu.solve(b);
  double rss = 0.0;
  for (long i = 0; i < d.n_records; ++i) {
    if (!d.delta[i]) continue;
    const double wi = use_design_weights ? d.w[i] : 1.0;
    double fit = model.coef[0];
    for (int k = 0; k < d.xdim; ++k) fit += model.coef[k + 1] * d.X(i, k);
    const double r = d.y[i] - fit;
    rss += wi * r * r;
  }
  model.sigma2 = rss / sw;
  return model;
}

/// E{h(x, Y) | x} for scalar h by Gauss-Hermite against the working density.
template <typename H>
double cond_expect_scalar(const H& h, const Eigen::VectorXd& x,
                          const NormalLinearWorkingModel& model,
                          const QuadratureRule& rule) {
  const double mu = model.mean(x);
  const double s = model.sd();
  double acc = 0.0;
  for (int k = 0; k < rule.q; ++k) {
    const double v = h(x, mu + s * rule.nodes[k]);
    if (!std::isfinite(v))
      throw NonFiniteIntegrand("cond_expect: integrand non-finite at a node");
    acc += rule.weights[k] * v;
  }
  return acc;
}

/// Vector-valued version of cond_expect_scalar.
template <typename H>
Eigen::VectorXd cond_expect(const H& h, const Eigen::VectorXd& x,
                            const NormalLinearWorkingModel& model,
                            const QuadratureRule& rule) {
  const double mu = model.mean(x);
  const double s = model.sd();
  Eigen::VectorXd acc;
  for (int k = 0; k < rule.q; ++k) {
    Eigen::VectorXd v = h(x, mu + s * rule.nodes[k]);
    if (!v.allFinite())
      throw NonFiniteIntegrand("cond_expect: integrand non-finite at a node");
    if (k == 0) acc = rule.weights[k] * v;
    else acc += rule.weights[k] * v;
  }
  return acc;
}

}  // namespace isamp
