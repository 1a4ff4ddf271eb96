#pragma once

#include <cmath>
#include <functional>

#include <Eigen/Dense>

namespace isamp {

struct MaximizeOptions {
  double tol_grad = 1e-9;
  double tol_step = 1e-13;
  int max_iter = 300;
};

struct MaximizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Objective callback: returns f(x) and, when grad != nullptr, fills the
/// gradient. Used in ascent direction (maximization).
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

/// BFGS ascent with backtracking line search.
inline MaximizeResult maximize_bfgs(const Objective& fn, Eigen::VectorXd x0,
                                    const MaximizeOptions& opts = {}) {
  const int p = static_cast<int>(x0.size());
  MaximizeResult res;
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(p, p);
  Eigen::VectorXd g(p), g_new(p);
  double f = fn(x0, &g);
  Eigen::VectorXd x = x0;

  for (int it = 0; it < opts.max_iter; ++it) {
    res.iterations = it;
    res.grad_norm = g.lpNorm<Eigen::Infinity>();
    if (res.grad_norm <= opts.tol_grad * (1.0 + std::abs(f))) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd dir = Hinv * g;
    double slope = g.dot(dir);
    if (!(slope > 0.0) || !dir.allFinite()) {  // reset on loss of curvature
      Hinv.setIdentity();
      dir = g;
      slope = g.squaredNorm();
    }
    double t = 1.0;
    double f_new = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + t * dir;
      f_new = fn(x_new, nullptr);
      if (std::isfinite(f_new) && f_new >= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted || (x_new - x).lpNorm<Eigen::Infinity>() <=
                         opts.tol_step * (1.0 + x.lpNorm<Eigen::Infinity>())) {
      res.converged = res.grad_norm <= 1e-6 * (1.0 + std::abs(f));
      break;
    }
    fn(x_new, &g_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g - g_new;  // ascent: y = -(g_new - g)
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const Eigen::VectorXd Hy = Hinv * yv;
      const double yHy = yv.dot(Hy);
      Hinv += ((sy + yHy) / (sy * sy)) * (s * s.transpose()) -
              (Hy * s.transpose() + s * Hy.transpose()) / sy;
    }
    x = x_new;
    f = f_new;
    g = g_new;
  }
  res.x = x;
  res.value = f;
  res.grad_norm = g.lpNorm<Eigen::Infinity>();
  if (res.grad_norm <= opts.tol_grad * (1.0 + std::abs(f))) res.converged = true;
  return res;
}

/// Newton refinement of a stationary point: forward-difference Hessian of
/// the analytic gradient, with steps accepted only while the objective does
/// not decrease and the gradient norm shrinks.
inline MaximizeResult newton_polish(const Objective& fn, Eigen::VectorXd x,
                                    int max_steps = 4) {
  const int p = static_cast<int>(x.size());
  Eigen::VectorXd g(p), gj(p), g_new(p);
  double f = fn(x, &g);
  for (int step = 0; step < max_steps; ++step) {
    Eigen::MatrixXd H(p, p);
    for (int j = 0; j < p; ++j) {
      const double h = 1e-7 * std::max(1.0, std::abs(x[j]));
      Eigen::VectorXd xj = x;
      xj[j] += h;
      fn(xj, &gj);
      H.col(j) = (gj - g) / h;
    }
    const Eigen::MatrixXd Hs = 0.5 * (H + H.transpose());
    const Eigen::VectorXd d = Hs.fullPivLu().solve(-g);
    if (!d.allFinite()) break;
    const Eigen::VectorXd x_new = x + d;
    const double f_new = fn(x_new, &g_new);
    if (!std::isfinite(f_new) || f_new < f - 1e-9 * (1.0 + std::abs(f)) ||
        g_new.lpNorm<Eigen::Infinity>() >= g.lpNorm<Eigen::Infinity>())
      break;
    x = x_new;
    f = f_new;
    g = g_new;
    if (g.lpNorm<Eigen::Infinity>() < 1e-13 * (1.0 + std::abs(f))) break;
  }
  MaximizeResult res;
  res.x = x;
  res.value = f;
  res.grad_norm = g.lpNorm<Eigen::Infinity>();
  res.converged = true;
  return res;
}

}  // namespace isamp
