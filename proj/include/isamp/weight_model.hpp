#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "isamp/config.hpp"
#include "isamp/errors.hpp"
#include "isamp/optim.hpp"
#include "isamp/rng.hpp"
#include "isamp/special.hpp"

namespace isamp {

/// Log-density of the sampled odds O = W - 1 given (m, phi):
/// O | (x, y, delta=1) ~ BetaPrime((1-m)phi, m phi + 1).
inline double logdensity_sampled_odds(double o, double m, double phi) {
  if (!(o > 0.0)) throw DomainError("logdensity_sampled_odds: o must be > 0");
  if (!(m > 0.0 && m < 1.0)) throw DomainError("logdensity_sampled_odds: m outside (0,1)");
  if (!(phi > 0.0)) throw DomainError("logdensity_sampled_odds: phi must be > 0");
  const double a = (1.0 - m) * phi;
  const double b = m * phi + 1.0;
  return (a - 1.0) * std::log(o) - (phi + 1.0) * std::log1p(o) - log_beta(a, b);
}

namespace detail {

// d/dm and d/dphi of logdensity_sampled_odds at fixed o.
inline void sampled_odds_score(double o, double m, double phi, double* dm,
                               double* dphi) {
  const double a = (1.0 - m) * phi;
  const double b = m * phi + 1.0;
  const double psi_a = digamma(a);
  const double psi_b = digamma(b);
  const double lo = std::log(o);
  *dm = phi * (psi_a - psi_b - lo);
  *dphi = (1.0 - m) * lo - std::log1p(o) -
          ((1.0 - m) * psi_a + m * psi_b - digamma(phi + 1.0));
}

}  // namespace detail

/// Interface over the fitted weight-distribution working model: the two
/// conditional weight moments that every estimator consumes.
class WeightLaw {
 public:
  virtual ~WeightLaw() = default;

  /// E(W | x, y); throws InfiniteMoment when the moment does not exist.
  virtual double expected_weight_population(const Eigen::VectorXd& x,
                                            double y) const = 0;

  /// E(W | x, y, delta = 1).
  virtual double expected_weight_sampled(const Eigen::VectorXd& x,
                                         double y) const = 0;

  /// pi_bar(x,y) = 1 / E(W|x,y), in (0,1).
  double pi_bar(const Eigen::VectorXd& x, double y) const {
    return 1.0 / expected_weight_population(x, y);
  }

  /// pi_bar clamped into [floor_val, 1]; never throws. Bumps *warnings
  /// whenever a clamp fires (tail nodes may leave the admissible region even
  /// when data cannot). Pass kEpsPiQuad when evaluating quadrature nodes and
  /// kEpsPi for observed data points.
  virtual double pi_bar_clamped(const Eigen::VectorXd& x, double y, long* warnings,
                                double floor_val = kEpsPi) const = 0;

  /// Population weight moment as seen by quadrature integrands:
  /// 1 / pi_bar_clamped at the quadrature floor.
  double expected_weight_clamped(const Eigen::VectorXd& x, double y,
                                 long* warnings) const {
    return 1.0 / pi_bar_clamped(x, y, warnings, kEpsPiQuad);
  }

  /// pi(x,y) = P(delta=1|x,y) = 1 / E_s(W|x,y), used by the CML estimator.
  double sampled_inclusion_prob(const Eigen::VectorXd& x, double y) const {
    return 1.0 / expected_weight_sampled(x, y);
  }

  /// Batched pi_bar_clamped over many y at one x; hot path of the efficient
  /// scores. Implementations may precompute per-x quantities.
  virtual void pi_bar_clamped_batch(const Eigen::VectorXd& x, const double* y,
                                    int n, double* out, long* warnings,
                                    double floor_val) const {
    for (int k = 0; k < n; ++k)
      out[k] = pi_bar_clamped(x, y[k], warnings, floor_val);
  }

  void expected_weight_clamped_batch(const Eigen::VectorXd& x, const double* y,
                                     int n, double* out, long* warnings) const {
    pi_bar_clamped_batch(x, y, n, out, warnings, kEpsPiQuad);
    for (int k = 0; k < n; ++k) out[k] = 1.0 / out[k];
  }

  /// Batched sampled inclusion probability pi(x,y) = 1/E_s(W|x,y).
  virtual void sampled_pi_batch(const Eigen::VectorXd& x, const double* y, int n,
                                double* out) const {
    for (int k = 0; k < n; ++k) out[k] = sampled_inclusion_prob(x, y[k]);
  }
};

/// Single beta-prime regression model: W^-1 | x,y ~ Beta(m phi, (1-m) phi)
/// with logistic mean link m(x,y;beta) over the regressors (1 [,x...] [,y]).
class BetaWeightModel final : public WeightLaw {
 public:
  Eigen::VectorXd beta;
  double phi = 0.0;
  bool use_x = true;
  bool use_y = true;

  double eta(const Eigen::VectorXd& x, double y) const {
    double t = beta[0];
    int j = 1;
    if (use_x)
      for (int k = 0; k < static_cast<int>(x.size()); ++k) t += beta[j++] * x[k];
    if (use_y) t += beta[j] * y;
    return t;
  }

  double mean_link(const Eigen::VectorXd& x, double y) const {
    return logistic(eta(x, y));
  }

  double expected_weight_population(const Eigen::VectorXd& x,
                                    double y) const override {
    const double m = mean_link(x, y);
    const double d = m * phi - 1.0;
    if (!(d > 0.0))
      throw InfiniteMoment("E(W|x,y) does not exist: m*phi <= 1");
    return (phi - 1.0) / d;
  }

  double expected_weight_sampled(const Eigen::VectorXd& x,
                                 double y) const override {
    return 1.0 / mean_link(x, y);
  }

  double pi_bar_clamped(const Eigen::VectorXd& x, double y, long* warnings,
                        double floor_val = kEpsPi) const override {
    const double m = mean_link(x, y);
    const double raw = (m * phi - 1.0) / (phi - 1.0);
    if (raw < floor_val) {
      if (warnings) ++*warnings;
      return floor_val;
    }
    if (raw > 1.0) {
      if (warnings) ++*warnings;
      return 1.0;
    }
    return raw;
  }

  /// Number of mean-link regressors for covariate dimension xdim.
  static int design_size(int xdim, bool use_x, bool use_y) {
    return 1 + (use_x ? xdim : 0) + (use_y ? 1 : 0);
  }
};

struct FitDiagnostics {
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  bool boundary_hit = false;  // fitted m*phi at some data point <= 1
  int restarts = 0;
};

/// Sampled-unit design for weight-model fitting: odds o = w - 1 plus the
/// covariates/response entering the mean link.
struct WeightFitData {
  Eigen::VectorXd o;
  Eigen::MatrixXd X;  // n x xdim (xdim may be 0)
  Eigen::VectorXd y;
};

struct SingleFitOptions {
  bool use_x = true;
  bool use_y = true;
  std::optional<double> fixed_phi;
  std::optional<Eigen::VectorXd> init_beta;
  std::optional<double> init_phi;
  double tol_grad = 1e-9;
  int max_iter = 500;
};

struct SingleFitResult {
  BetaWeightModel model;
  FitDiagnostics diag;
};

namespace detail {

inline Eigen::MatrixXd link_design(const WeightFitData& data, bool use_x,
                                   bool use_y) {
  const int n = static_cast<int>(data.o.size());
  const int xdim = static_cast<int>(data.X.cols());
  const int k = BetaWeightModel::design_size(use_x ? xdim : 0, use_x, use_y);
  Eigen::MatrixXd V(n, k);
  V.col(0).setOnes();
  int j = 1;
  if (use_x)
    for (int c = 0; c < xdim; ++c) V.col(j++) = data.X.col(c);
  if (use_y) V.col(j) = data.y;
  return V;
}

// Sampled beta-prime log likelihood and gradient over (beta, log phi)
// (log phi omitted when fixed_phi). Returns the log likelihood.
inline double single_loglik(const Eigen::VectorXd& params, const Eigen::MatrixXd& V,
                            const Eigen::VectorXd& o, std::optional<double> fixed_phi,
                            Eigen::VectorXd* grad) {
  const int k = static_cast<int>(V.cols());
  const Eigen::VectorXd beta = params.head(k);
  const double phi = fixed_phi ? *fixed_phi : std::exp(params[k]);
  if (!std::isfinite(phi) || phi <= 0.0) return -std::numeric_limits<double>::infinity();
  double ll = 0.0;
  if (grad) grad->setZero(params.size());
  const long n = o.size();
  for (long i = 0; i < n; ++i) {
    const double eta = V.row(i).dot(beta);
    const double m = logistic(eta);
    if (!(m > 0.0 && m < 1.0)) return -std::numeric_limits<double>::infinity();
    const double a = (1.0 - m) * phi;
    const double b = m * phi + 1.0;
    const double lo = std::log(o[i]);
    ll += (a - 1.0) * lo - (phi + 1.0) * std::log1p(o[i]) - log_beta(a, b);
    if (grad) {
      double dm, dphi;
      sampled_odds_score(o[i], m, phi, &dm, &dphi);
      grad->head(k) += dm * m * (1.0 - m) * V.row(i).transpose();
      if (!fixed_phi) (*grad)[k] += dphi * phi;
    }
  }
  return ll;
}

}  // namespace detail

/// Maximum likelihood fit of the single beta-prime weight model on sampled
/// units, using the tilted sampled-odds density. Optimizes over the
/// unconstrained (beta, log phi); the population-moment constraint
/// m*phi > 1 is not imposed here (the sampled likelihood does not need it)
/// but a violation at any data point is reported via boundary_hit.
inline SingleFitResult fit_single(const WeightFitData& data,
                                  const SingleFitOptions& opts = {}) {
  const long n = data.o.size();
  const Eigen::MatrixXd V = detail::link_design(data, opts.use_x, opts.use_y);
  const int k = static_cast<int>(V.cols());
  if (n < k + 1) throw EmptySample("fit_single: need at least len(beta)+1 sampled units");
  for (long i = 0; i < n; ++i)
    if (!(data.o[i] > 0.0))
      throw DomainError("fit_single: every sampled odds must be positive (w > 1)");

  Eigen::VectorXd params(opts.fixed_phi ? k : k + 1);
  if (opts.init_beta) {
    if (opts.init_beta->size() != k)
      throw DomainError("fit_single: init_beta has wrong length");
    params.head(k) = *opts.init_beta;
  } else {
    params.head(k).setZero();
    const double obar = data.o.mean();
    params[0] = logit(std::clamp(1.0 / (1.0 + obar), 1e-8, 1.0 - 1e-8));
  }
  if (!opts.fixed_phi) {
    double lphi0;
    if (opts.init_phi) {
      lphi0 = std::log(*opts.init_phi);
    } else {
      // coarse profile over log phi at the initial beta
      double best = -std::numeric_limits<double>::infinity();
      lphi0 = std::log(10.0);
      for (double lp = std::log(1.5); lp <= std::log(1e7); lp += 0.7) {
        Eigen::VectorXd trial = params;
        trial[k] = lp;
        const double ll = detail::single_loglik(trial, V, data.o, std::nullopt, nullptr);
        if (ll > best) {
          best = ll;
          lphi0 = lp;
        }
      }
    }
    params[k] = lphi0;
  }

  FitDiagnostics diag;
  MaximizeOptions mo;
  mo.tol_grad = opts.tol_grad;
  mo.max_iter = opts.max_iter;
  const auto obj = [&](const Eigen::VectorXd& p, Eigen::VectorXd* g) {
    return detail::single_loglik(p, V, data.o, opts.fixed_phi, g);
  };
  diag.loglik_trace.push_back(obj(params, nullptr));
  MaximizeResult res = maximize_bfgs(obj, params, mo);
  {
    const MaximizeResult polished = newton_polish(obj, res.x, res.converged ? 4 : 8);
    res.x = polished.x;
    res.value = polished.value;
    res.grad_norm = polished.grad_norm;
    if (!res.converged)
      res.converged = res.grad_norm <= 1e-6 * (1.0 + std::abs(res.value));
  }
  diag.loglik_trace.push_back(res.value);
  diag.iterations = res.iterations;
  diag.gradient_norm = res.grad_norm;
  diag.converged = res.converged;

  SingleFitResult out;
  out.model.beta = res.x.head(k);
  out.model.phi = opts.fixed_phi ? *opts.fixed_phi : std::exp(res.x[k]);
  out.model.use_x = opts.use_x;
  out.model.use_y = opts.use_y;
  for (long i = 0; i < n; ++i) {
    const double m = logistic(V.row(i).dot(out.model.beta));
    if (m * out.model.phi <= 1.0 + 1e-9) {
      diag.boundary_hit = true;
      break;
    }
  }
  out.diag = diag;
  if (!res.converged)
    throw NonConvergence("fit_single: no convergence after " +
                         std::to_string(res.iterations) + " iterations (|grad| = " +
                         std::to_string(res.grad_norm) + ")");
  return out;
}

/// Observed information of the single fit at the fitted parameters, over
/// (beta, log phi); invert for the asymptotic covariance.
inline Eigen::MatrixXd single_fit_observed_information(const BetaWeightModel& model,
                                                       const WeightFitData& data) {
  const Eigen::MatrixXd V = detail::link_design(data, model.use_x, model.use_y);
  const int k = static_cast<int>(V.cols());
  Eigen::VectorXd params(k + 1);
  params.head(k) = model.beta;
  params[k] = std::log(model.phi);
  const int p = k + 1;
  Eigen::MatrixXd H(p, p);
  Eigen::VectorXd g0(p), g1(p);
  detail::single_loglik(params, V, data.o, std::nullopt, &g0);
  for (int j = 0; j < p; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(params[j]));
    Eigen::VectorXd pj = params;
    pj[j] += h;
    detail::single_loglik(pj, V, data.o, std::nullopt, &g1);
    H.col(j) = (g1 - g0) / h;
  }
  return -0.5 * (H + H.transpose());
}

/// H-component mixture weight model (stratified designs): component g is a
/// beta-prime weight law, the latent class follows multinomial logits over
/// (1 [,x] [,y]) with the first row pinned at zero.
class MixtureWeightModel final : public WeightLaw {
 public:
  int H = 1;
  Eigen::MatrixXd alpha;  // H x k_mix; row 0 identically zero
  bool mix_use_x = false;
  bool mix_use_y = true;
  std::vector<BetaWeightModel> components;

  int mix_design_size(int xdim) const {
    return 1 + (mix_use_x ? xdim : 0) + (mix_use_y ? 1 : 0);
  }

  /// Population class probabilities p_g(x, y; alpha).
  void proportions(const Eigen::VectorXd& x, double y, Eigen::VectorXd* p) const {
    p->resize(H);
    double mx = 0.0;
    for (int g = 0; g < H; ++g) {
      double t = alpha(g, 0);
      int j = 1;
      if (mix_use_x)
        for (int c = 0; c < static_cast<int>(x.size()); ++c) t += alpha(g, j++) * x[c];
      if (mix_use_y) t += alpha(g, j) * y;
      (*p)[g] = t;
      if (t > mx) mx = t;
    }
    double s = 0.0;
    for (int g = 0; g < H; ++g) {
      (*p)[g] = std::exp((*p)[g] - mx);
      s += (*p)[g];
    }
    *p /= s;
  }

  double expected_weight_population(const Eigen::VectorXd& x,
                                    double y) const override {
    Eigen::VectorXd p;
    proportions(x, y, &p);
    double ew = 0.0;
    for (int g = 0; g < H; ++g) {
      const double m = components[g].mean_link(x, y);
      const double phi = components[g].phi;
      const double d = m * phi - 1.0;
      if (!(d > 0.0))
        throw InfiniteMoment("E(W|x,y) does not exist: component m*phi <= 1");
      ew += p[g] * (phi - 1.0) / d;
    }
    return ew;
  }

  double expected_weight_sampled(const Eigen::VectorXd& x,
                                 double y) const override {
    // E_s(W|x,y) = sum_g P(G=g|x,y,delta=1)/m_g with P(G=g|..) ~ p_g m_g,
    // which collapses to 1 / sum_g p_g m_g.
    Eigen::VectorXd p;
    proportions(x, y, &p);
    double pm = 0.0;
    for (int g = 0; g < H; ++g) pm += p[g] * components[g].mean_link(x, y);
    return 1.0 / pm;
  }

  double pi_bar_clamped(const Eigen::VectorXd& x, double y, long* warnings,
                        double floor_val = kEpsPi) const override {
    Eigen::VectorXd p;
    proportions(x, y, &p);
    double ew = 0.0;
    bool clamped = false;
    for (int g = 0; g < H; ++g) {
      const double m = components[g].mean_link(x, y);
      const double phi = components[g].phi;
      const double d = m * phi - 1.0;
      double term;
      if (!(d > 0.0)) {
        term = 1.0 / floor_val;
        clamped = true;
      } else {
        term = (phi - 1.0) / d;
      }
      ew += p[g] * term;
    }
    double raw = 1.0 / ew;
    if (raw < floor_val) {
      raw = floor_val;
      clamped = true;
    } else if (raw > 1.0) {
      raw = 1.0;
      clamped = true;
    }
    if (clamped && warnings) ++*warnings;
    return raw;
  }

  void pi_bar_clamped_batch(const Eigen::VectorXd& x, const double* y, int n,
                            double* out, long* warnings,
                            double floor_val) const override {
    // fast path for covariate-free components: per-component weight means and
    // the x part of the mixture logits are node-independent
    bool flat = true;
    for (const BetaWeightModel& c : components)
      if (c.use_x || c.use_y) flat = false;
    if (!flat) {
      WeightLaw::pi_bar_clamped_batch(x, y, n, out, warnings, floor_val);
      return;
    }
    std::vector<double> ew(H), base(H), ycoef(H);
    bool any_clamped = false;
    const int ycol = 1 + (mix_use_x ? static_cast<int>(x.size()) : 0);
    for (int g = 0; g < H; ++g) {
      const double m = logistic(components[g].beta[0]);
      const double phi = components[g].phi;
      const double d = m * phi - 1.0;
      if (d > 0.0) {
        ew[g] = (phi - 1.0) / d;
      } else {
        ew[g] = 1.0 / floor_val;
        any_clamped = true;
      }
      double t = alpha(g, 0);
      if (mix_use_x)
        for (int c = 0; c < static_cast<int>(x.size()); ++c)
          t += alpha(g, 1 + c) * x[c];
      base[g] = t;
      ycoef[g] = mix_use_y ? alpha(g, ycol) : 0.0;
    }
    std::vector<double> t(H);
    long clamps = 0;
    for (int k = 0; k < n; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int g = 0; g < H; ++g) {
        t[g] = base[g] + ycoef[g] * y[k];
        if (t[g] > mx) mx = t[g];
      }
      double z = 0.0, acc = 0.0;
      for (int g = 0; g < H; ++g) {
        const double e = std::exp(t[g] - mx);
        z += e;
        acc += e * ew[g];
      }
      double raw = z / acc;
      if (raw < floor_val) {
        raw = floor_val;
        ++clamps;
      } else if (raw > 1.0) {
        raw = 1.0;
        ++clamps;
      } else if (any_clamped) {
        ++clamps;
      }
      out[k] = raw;
    }
    if (warnings) *warnings += clamps;
  }

  void sampled_pi_batch(const Eigen::VectorXd& x, const double* y, int n,
                        double* out) const override {
    bool flat = true;
    for (const BetaWeightModel& c : components)
      if (c.use_x || c.use_y) flat = false;
    if (!flat) {
      WeightLaw::sampled_pi_batch(x, y, n, out);
      return;
    }
    // pi = sum_g p_g(x,y) m_g with node-independent m_g
    std::vector<double> m(H), base(H), ycoef(H);
    const int ycol = 1 + (mix_use_x ? static_cast<int>(x.size()) : 0);
    for (int g = 0; g < H; ++g) {
      m[g] = logistic(components[g].beta[0]);
      double t = alpha(g, 0);
      if (mix_use_x)
        for (int c = 0; c < static_cast<int>(x.size()); ++c)
          t += alpha(g, 1 + c) * x[c];
      base[g] = t;
      ycoef[g] = mix_use_y ? alpha(g, ycol) : 0.0;
    }
    std::vector<double> t(H);
    for (int k = 0; k < n; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int g = 0; g < H; ++g) {
        t[g] = base[g] + ycoef[g] * y[k];
        if (t[g] > mx) mx = t[g];
      }
      double z = 0.0, acc = 0.0;
      for (int g = 0; g < H; ++g) {
        const double e = std::exp(t[g] - mx);
        z += e;
        acc += e * m[g];
      }
      out[k] = acc / z;
    }
  }
};

/// Posterior class membership of a sampled unit:
/// P(G=g | w,x,y,delta=1) ~ f_s(w-1 | g) * p_g(alpha) * m_g.
inline Eigen::VectorXd posterior_responsibility(double w, const Eigen::VectorXd& x,
                                                double y,
                                                const MixtureWeightModel& model) {
  if (!(w > 1.0)) throw DomainError("posterior_responsibility: w must exceed 1");
  const int H = model.H;
  Eigen::VectorXd p;
  model.proportions(x, y, &p);
  Eigen::VectorXd lp(H);
  const double o = w - 1.0;
  for (int g = 0; g < H; ++g) {
    const double m = model.components[g].mean_link(x, y);
    lp[g] = logdensity_sampled_odds(o, m, model.components[g].phi) + std::log(p[g]) +
            std::log(m);
  }
  const double mx = lp.maxCoeff();
  if (!std::isfinite(mx))
    throw DegenerateResponsibility("all component densities vanish at w");
  Eigen::VectorXd out(H);
  double s = 0.0;
  for (int g = 0; g < H; ++g) {
    out[g] = std::exp(lp[g] - mx);
    s += out[g];
  }
  return out / s;
}

struct EmOptions {
  bool mix_use_x = false;   // mixture proportions over (1 [,x] [,y])
  bool mix_use_y = true;
  bool comp_use_x = false;  // component mean links; default covariate-free
  bool comp_use_y = false;
  double tol_em = 1e-8;
  int max_iter = 500;
  int restarts = 5;
  double eps_resp = 1e-6;
  std::uint64_t seed = 0;
  int mstep_iter = 40;
  /// Observed stratum labels (1-based, one per sampled unit). Only used
  /// when use_observed_labels is set; the default fit treats G as latent.
  std::vector<int> labels;
  bool use_observed_labels = false;
};

struct MixtureFitResult {
  MixtureWeightModel model;
  FitDiagnostics diag;
};

namespace detail {

struct MixPack {
  // parameter layout: alpha rows 1..H-1 (k_mix each), then per component
  // (beta_g (k_comp), log phi_g)
  int H, k_mix, k_comp;
  int size() const { return (H - 1) * k_mix + H * (k_comp + 1); }

  void unpack(const Eigen::VectorXd& v, MixtureWeightModel* model) const {
    model->H = H;
    model->alpha.setZero(H, k_mix);
    int at = 0;
    for (int g = 1; g < H; ++g)
      for (int j = 0; j < k_mix; ++j) model->alpha(g, j) = v[at++];
    model->components.resize(H);
    for (int g = 0; g < H; ++g) {
      model->components[g].beta = v.segment(at, k_comp);
      at += k_comp;
      model->components[g].phi = std::exp(v[at++]);
    }
  }

  Eigen::VectorXd pack(const MixtureWeightModel& model) const {
    Eigen::VectorXd v(size());
    int at = 0;
    for (int g = 1; g < H; ++g)
      for (int j = 0; j < k_mix; ++j) v[at++] = model.alpha(g, j);
    for (int g = 0; g < H; ++g) {
      v.segment(at, k_comp) = model.components[g].beta;
      at += k_comp;
      v[at++] = std::log(model.components[g].phi);
    }
    return v;
  }
};

// Responsibility-weighted sufficient statistics for the M-step. For
// covariate-free components the density part of Q depends on the data only
// through these sums, so the per-unit loop reduces to the class-probability
// part.
struct MStepStats {
  Eigen::VectorXd lo, l1o;          // log o_i, log1p(o_i): EM constants
  Eigen::VectorXd r_sum, r_lo, r_l1o;  // per component
  void refresh(const Eigen::MatrixXd& resp) {
    const int H = static_cast<int>(resp.cols());
    r_sum.resize(H);
    r_lo.resize(H);
    r_l1o.resize(H);
    for (int g = 0; g < H; ++g) {
      r_sum[g] = resp.col(g).sum();
      r_lo[g] = resp.col(g).dot(lo);
      r_l1o[g] = resp.col(g).dot(l1o);
    }
  }
};

// Q and gradient, covariate-free components (k_comp == 1).
inline double mixture_q_flat(const Eigen::VectorXd& params, const MixPack& pk,
                             const Eigen::MatrixXd& U, const Eigen::MatrixXd& resp,
                             const MStepStats& st, Eigen::VectorXd* grad) {
  const int H = pk.H;
  const long n = resp.rows();
  if (grad) grad->setZero(params.size());
  const int comp_at = (H - 1) * pk.k_mix;

  Eigen::VectorXd m(H), phi(H), logm(H);
  for (int g = 0; g < H; ++g) {
    m[g] = logistic(params[comp_at + 2 * g]);
    phi[g] = std::exp(params[comp_at + 2 * g + 1]);
    if (!(m[g] > 0.0 && m[g] < 1.0) || !std::isfinite(phi[g]) || phi[g] <= 0.0)
      return -std::numeric_limits<double>::infinity();
    logm[g] = std::log(m[g]);
  }

  double q = 0.0;
  // density part through the sufficient statistics
  for (int g = 0; g < H; ++g) {
    const double a = (1.0 - m[g]) * phi[g];
    const double b = m[g] * phi[g] + 1.0;
    q += (a - 1.0) * st.r_lo[g] - (phi[g] + 1.0) * st.r_l1o[g] -
         st.r_sum[g] * log_beta(a, b);
    if (grad) {
      const double psi_a = digamma(a);
      const double psi_b = digamma(b);
      const double dQdm =
          phi[g] * (st.r_sum[g] * (psi_a - psi_b) - st.r_lo[g]);
      const double dQdphi = (1.0 - m[g]) * st.r_lo[g] - st.r_l1o[g] -
                            st.r_sum[g] * ((1.0 - m[g]) * psi_a + m[g] * psi_b -
                                           digamma(phi[g] + 1.0));
      (*grad)[comp_at + 2 * g] += dQdm * m[g] * (1.0 - m[g]);
      (*grad)[comp_at + 2 * g + 1] += dQdphi * phi[g];
    }
  }

  // class-probability part: softmax over alpha_g^T u + log m_g
  Eigen::VectorXd t(H), s(H);
  for (long i = 0; i < n; ++i) {
    double tmax = -std::numeric_limits<double>::infinity();
    for (int g = 0; g < H; ++g) {
      double ag = 0.0;
      if (g > 0)
        for (int j = 0; j < pk.k_mix; ++j)
          ag += params[(g - 1) * pk.k_mix + j] * U(i, j);
      t[g] = ag + logm[g];
      if (t[g] > tmax) tmax = t[g];
    }
    double z = 0.0;
    for (int g = 0; g < H; ++g) {
      s[g] = std::exp(t[g] - tmax);
      z += s[g];
    }
    const double lz = std::log(z) + tmax;
    for (int g = 0; g < H; ++g) {
      s[g] /= z;
      q += resp(i, g) * (t[g] - lz);
      if (grad) {
        const double c = resp(i, g) - s[g];
        if (g > 0)
          for (int j = 0; j < pk.k_mix; ++j)
            (*grad)[(g - 1) * pk.k_mix + j] += c * U(i, j);
        (*grad)[comp_at + 2 * g] += c * (1.0 - m[g]);
      }
    }
  }
  return q;
}

// Expected complete sampled log-likelihood Q(params | responsibilities) and
// its analytic gradient. U, Vc: mixture / component design matrices.
inline double mixture_q(const Eigen::VectorXd& params, const MixPack& pk,
                        const Eigen::MatrixXd& U, const Eigen::MatrixXd& Vc,
                        const Eigen::VectorXd& o, const Eigen::MatrixXd& resp,
                        Eigen::VectorXd* grad) {
  const int H = pk.H;
  const long n = o.size();
  MixtureWeightModel mw;
  mw.mix_use_x = false;  // designs are prebuilt; flags unused here
  pk.unpack(params, &mw);
  if (grad) grad->setZero(params.size());
  double q = 0.0;

  for (int g = 0; g < H; ++g)
    if (!std::isfinite(mw.components[g].phi) || mw.components[g].phi <= 0.0)
      return -std::numeric_limits<double>::infinity();

  Eigen::VectorXd t(H), s(H), m(H), lfs(H), dm_f(H), dphi_f(H);
  for (long i = 0; i < n; ++i) {
    const double lo = std::log(o[i]);
    const double l1o = std::log1p(o[i]);
    for (int g = 0; g < H; ++g) {
      const double eta = Vc.row(i).dot(mw.components[g].beta);
      m[g] = logistic(eta);
      if (!(m[g] > 0.0 && m[g] < 1.0))
        return -std::numeric_limits<double>::infinity();
      const double phi = mw.components[g].phi;
      const double a = (1.0 - m[g]) * phi;
      const double b = m[g] * phi + 1.0;
      lfs[g] = (a - 1.0) * lo - (phi + 1.0) * l1o - log_beta(a, b);
      if (grad) {
        const double psi_a = digamma(a);
        const double psi_b = digamma(b);
        dm_f[g] = phi * (psi_a - psi_b - lo);
        dphi_f[g] = (1.0 - m[g]) * lo - l1o -
                    ((1.0 - m[g]) * psi_a + m[g] * psi_b - digamma(phi + 1.0));
      }
      double ag = (g == 0) ? 0.0 : mw.alpha.row(g).dot(U.row(i));
      t[g] = ag + std::log(m[g]);
    }
    const double tmax = t.maxCoeff();
    double z = 0.0;
    for (int g = 0; g < H; ++g) {
      s[g] = std::exp(t[g] - tmax);
      z += s[g];
    }
    const double lz = std::log(z) + tmax;
    s /= z;
    for (int g = 0; g < H; ++g) {
      const double r = resp(i, g);
      q += r * (t[g] - lz + lfs[g]);
    }
    if (grad) {
      int at = 0;
      for (int g = 1; g < H; ++g) {
        const double c = resp(i, g) - s[g];
        for (int j = 0; j < pk.k_mix; ++j) (*grad)[at + j] += c * U(i, j);
        at += pk.k_mix;
      }
      for (int g = 0; g < H; ++g) {
        const double mg = m[g];
        const double dlogm = 1.0 - mg;  // d log m / d eta
        const double coef =
            (resp(i, g) - s[g]) * dlogm + resp(i, g) * dm_f[g] * mg * (1.0 - mg);
        for (int j = 0; j < pk.k_comp; ++j) (*grad)[at + j] += coef * Vc(i, j);
        at += pk.k_comp;
        (*grad)[at++] += resp(i, g) * dphi_f[g] * mw.components[g].phi;
      }
    }
  }
  return q;
}

// Observed-data sampled log likelihood of the mixture. Per-component
// density constants are hoisted when the component mean links carry no
// covariates.
inline double mixture_observed_loglik(const MixtureWeightModel& mw,
                                      const Eigen::MatrixXd& U,
                                      const Eigen::MatrixXd& Vc,
                                      const Eigen::VectorXd& o) {
  const int H = mw.H;
  const long n = o.size();
  bool flat = true;
  for (const BetaWeightModel& c : mw.components)
    if (c.use_x || c.use_y) flat = false;

  Eigen::VectorXd am1(H), phi1(H), lnB(H), logm(H);
  if (flat) {
    for (int g = 0; g < H; ++g) {
      const double m = logistic(mw.components[g].beta[0]);
      if (!(m > 0.0 && m < 1.0)) return -std::numeric_limits<double>::infinity();
      const double phi = mw.components[g].phi;
      am1[g] = (1.0 - m) * phi - 1.0;
      phi1[g] = phi + 1.0;
      lnB[g] = log_beta((1.0 - m) * phi, m * phi + 1.0);
      logm[g] = std::log(m);
    }
  }

  double ll = 0.0;
  Eigen::VectorXd t(H);
  for (long i = 0; i < n; ++i) {
    const double lo = std::log(o[i]);
    const double l1o = std::log1p(o[i]);
    double tmax = -std::numeric_limits<double>::infinity();
    double smax = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd cls(H);
    for (int g = 0; g < H; ++g) {
      double lf, lm;
      if (flat) {
        lf = am1[g] * lo - phi1[g] * l1o - lnB[g];
        lm = logm[g];
      } else {
        const double m = logistic(Vc.row(i).dot(mw.components[g].beta));
        if (!(m > 0.0 && m < 1.0)) return -std::numeric_limits<double>::infinity();
        const double phi = mw.components[g].phi;
        const double a = (1.0 - m) * phi;
        const double b = m * phi + 1.0;
        lf = (a - 1.0) * lo - (phi + 1.0) * l1o - log_beta(a, b);
        lm = std::log(m);
      }
      const double ag = (g == 0) ? 0.0 : mw.alpha.row(g).dot(U.row(i));
      cls[g] = ag + lm;
      t[g] = cls[g] + lf;
      if (cls[g] > smax) smax = cls[g];
      if (t[g] > tmax) tmax = t[g];
    }
    double num = 0.0, den = 0.0;
    for (int g = 0; g < H; ++g) {
      num += std::exp(t[g] - tmax);
      den += std::exp(cls[g] - smax);
    }
    ll += (std::log(num) + tmax) - (std::log(den) + smax);
  }
  return ll;
}

}  // namespace detail

/// EM fit of the mixture weight model on sampled units. The class label is
/// treated as latent (matching the E-step posterior); observed labels may be
/// supplied through EmOptions either to seed the split or, behind
/// use_observed_labels, to replace the E-step with hard memberships.
inline MixtureFitResult em_fit_mixture(const WeightFitData& data, int H,
                                       const EmOptions& opts = {}) {
  if (H < 1) throw DomainError("em_fit_mixture: H must be >= 1");
  const long n = data.o.size();
  for (long i = 0; i < n; ++i)
    if (!(data.o[i] > 0.0))
      throw DomainError("em_fit_mixture: every sampled odds must be positive");

  const int xdim = static_cast<int>(data.X.cols());
  // prebuilt designs
  const int k_mix = 1 + (opts.mix_use_x ? xdim : 0) + (opts.mix_use_y ? 1 : 0);
  const int k_comp = 1 + (opts.comp_use_x ? xdim : 0) + (opts.comp_use_y ? 1 : 0);
  Eigen::MatrixXd U(n, k_mix), Vc(n, k_comp);
  U.col(0).setOnes();
  Vc.col(0).setOnes();
  {
    int j = 1;
    if (opts.mix_use_x)
      for (int c = 0; c < xdim; ++c) U.col(j++) = data.X.col(c);
    if (opts.mix_use_y) U.col(j) = data.y;
    j = 1;
    if (opts.comp_use_x)
      for (int c = 0; c < xdim; ++c) Vc.col(j++) = data.X.col(c);
    if (opts.comp_use_y) Vc.col(j) = data.y;
  }
  if (n < (H - 1) * k_mix + H * (k_comp + 1) + 1)
    throw EmptySample("em_fit_mixture: too few sampled units for the parameter count");

  detail::MixPack pk{H, k_mix, k_comp};
  Philox rng(opts.seed, 0x6d6978ull /* "mix" */);

  // quantile split of log w, refined to the natural breaks with a 1-d
  // k-means pass (equal-count splits can merge strata of unequal size)
  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](long a, long b) { return data.o[a] < data.o[b]; });
  std::vector<int> group(n);
  if (opts.use_observed_labels || !opts.labels.empty()) {
    if (static_cast<long>(opts.labels.size()) != n)
      throw DomainError("em_fit_mixture: labels length mismatch");
    for (long i = 0; i < n; ++i) {
      if (opts.labels[i] < 1 || opts.labels[i] > H)
        throw DomainError("em_fit_mixture: label outside 1..H");
      group[i] = opts.labels[i] - 1;
    }
  } else {
    std::vector<double> lw(n);
    for (long i = 0; i < n; ++i) lw[i] = std::log1p(data.o[i]);
    // farthest-point center seeds (equal-count quantile seeds can land two
    // centers inside one dominant stratum), then a Lloyd refinement
    std::vector<double> centers;
    centers.push_back(lw[order[n / 2]]);
    while (static_cast<int>(centers.size()) < H) {
      double best_d = -1.0, best_v = centers[0];
      for (long i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (double c : centers) dmin = std::min(dmin, std::abs(lw[i] - c));
        if (dmin > best_d) {
          best_d = dmin;
          best_v = lw[i];
        }
      }
      centers.push_back(best_v);
    }
    for (int pass = 0; pass < 50; ++pass) {
      std::vector<double> sum(H, 0.0);
      std::vector<long> cnt(H, 0);
      for (long i = 0; i < n; ++i) {
        int best = 0;
        double bd = std::abs(lw[i] - centers[0]);
        for (int g = 1; g < H; ++g) {
          const double dd = std::abs(lw[i] - centers[g]);
          if (dd < bd) {
            bd = dd;
            best = g;
          }
        }
        group[i] = best;
        sum[best] += lw[i];
        ++cnt[best];
      }
      bool changed = false;
      for (int g = 0; g < H; ++g) {
        if (cnt[g] == 0) continue;
        const double c = sum[g] / cnt[g];
        if (std::abs(c - centers[g]) > 1e-12) changed = true;
        centers[g] = c;
      }
      if (!changed) break;
    }
  }

  Eigen::VectorXd last_error_hint;
  for (int attempt = 0; attempt <= opts.restarts; ++attempt) {
    // component seeds per group
    MixtureWeightModel mw;
    mw.H = H;
    mw.mix_use_x = opts.mix_use_x;
    mw.mix_use_y = opts.mix_use_y;
    mw.alpha.setZero(H, k_mix);
    mw.components.resize(H);
    Eigen::VectorXd m0(H);
    std::vector<double> cnt(H, 0.0);
    for (int g = 0; g < H; ++g) {
      double sw = 0.0, sww = 0.0;
      long c = 0;
      for (long i = 0; i < n; ++i)
        if (group[i] == g) {
          sw += 1.0 + data.o[i];
          ++c;
        }
      if (c == 0) {
        sw = 1.0 + data.o.mean();
        c = 1;
      }
      const double wbar = sw / c;
      double mg = std::clamp(1.0 / wbar, 1e-6, 1.0 - 1e-6);
      double varo = 0.0;
      for (long i = 0; i < n; ++i)
        if (group[i] == g) {
          const double d = (1.0 + data.o[i]) - wbar;
          varo += d * d;
        }
      varo = c > 1 ? varo / (c - 1) : 1.0;
      double phig = (1.0 - mg) / std::max(mg * mg * mg * varo, 1e-300);
      phig = std::clamp(phig, 5.0, 1e7);
      if (attempt > 0) {
        mg = std::clamp(mg * std::exp(0.25 * rng.normal()), 1e-7, 1.0 - 1e-7);
        phig = std::clamp(phig * std::exp(0.5 * rng.normal()), 3.0, 1e8);
      }
      m0[g] = mg;
      cnt[g] = static_cast<double>(c);
      BetaWeightModel& comp = mw.components[g];
      comp.use_x = opts.comp_use_x;
      comp.use_y = opts.comp_use_y;
      comp.beta.setZero(k_comp);
      comp.beta[0] = logit(mg);
      comp.phi = phig;
      if (g > 0)
        mw.alpha(g, 0) = std::log((cnt[g] / m0[g]) / std::max(cnt[0] / m0[0], 1e-12));
    }

    Eigen::VectorXd params = pk.pack(mw);
    FitDiagnostics diag;
    diag.restarts = attempt;
    double ll = detail::mixture_observed_loglik(mw, U, Vc, data.o);
    diag.loglik_trace.push_back(ll);

    const bool flat_comp = k_comp == 1 && !opts.comp_use_x && !opts.comp_use_y;
    detail::MStepStats st;
    st.lo.resize(n);
    st.l1o.resize(n);
    for (long i = 0; i < n; ++i) {
      st.lo[i] = std::log(data.o[i]);
      st.l1o[i] = std::log1p(data.o[i]);
    }

    Eigen::MatrixXd resp(n, H);
    Eigen::VectorXd lp(H);
    bool collapsed = false;
    bool done = false;
    for (int it = 0; it < opts.max_iter; ++it) {
      // E-step
      if (opts.use_observed_labels) {
        resp.setZero();
        for (long i = 0; i < n; ++i) resp(i, group[i]) = 1.0;
      } else if (flat_comp) {
        Eigen::VectorXd am1(H), phi1(H), lnB(H), logm(H);
        for (int g = 0; g < H; ++g) {
          const double m = logistic(mw.components[g].beta[0]);
          const double phi = mw.components[g].phi;
          am1[g] = (1.0 - m) * phi - 1.0;
          phi1[g] = phi + 1.0;
          lnB[g] = log_beta((1.0 - m) * phi, m * phi + 1.0);
          logm[g] = std::log(m);
        }
        for (long i = 0; i < n; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int g = 0; g < H; ++g) {
            const double ag = (g == 0) ? 0.0 : mw.alpha.row(g).dot(U.row(i));
            lp[g] = am1[g] * st.lo[i] - phi1[g] * st.l1o[i] - lnB[g] + ag + logm[g];
            if (lp[g] > mx) mx = lp[g];
          }
          if (!std::isfinite(mx))
            throw DegenerateResponsibility("all component densities vanish at a w");
          double s = 0.0;
          for (int g = 0; g < H; ++g) {
            resp(i, g) = std::exp(lp[g] - mx);
            s += resp(i, g);
          }
          resp.row(i) /= s;
        }
      } else {
        for (long i = 0; i < n; ++i) {
          const Eigen::VectorXd xi = data.X.row(i).transpose();
          resp.row(i) =
              posterior_responsibility(1.0 + data.o[i], xi, data.y[i], mw).transpose();
        }
      }
      Eigen::VectorXd colsum = resp.colwise().sum();
      if (colsum.minCoeff() < opts.eps_resp) {
        collapsed = true;
        break;
      }
      // M-step: ascend the expected complete sampled log likelihood
      st.refresh(resp);
      MaximizeOptions mo;
      mo.max_iter = opts.mstep_iter;
      mo.tol_grad = 1e-10;
      const Objective qfn = flat_comp
          ? Objective([&](const Eigen::VectorXd& p, Eigen::VectorXd* g) {
              return detail::mixture_q_flat(p, pk, U, resp, st, g);
            })
          : Objective([&](const Eigen::VectorXd& p, Eigen::VectorXd* g) {
              return detail::mixture_q(p, pk, U, Vc, data.o, resp, g);
            });
      MaximizeResult mres = maximize_bfgs(qfn, params, mo);
      if (mres.grad_norm > 1e-6 * (1.0 + std::abs(mres.value)))
        mres = newton_polish(qfn, mres.x, 3);
      params = mres.x;
      pk.unpack(params, &mw);
      mw.mix_use_x = opts.mix_use_x;
      mw.mix_use_y = opts.mix_use_y;
      for (int g = 0; g < H; ++g) {
        mw.components[g].use_x = opts.comp_use_x;
        mw.components[g].use_y = opts.comp_use_y;
      }
      const double ll_new = detail::mixture_observed_loglik(mw, U, Vc, data.o);
      diag.loglik_trace.push_back(ll_new);
      diag.iterations = it + 1;
      diag.gradient_norm = mres.grad_norm;
      if (std::abs(ll_new - ll) < opts.tol_em && it > 0) {
        ll = ll_new;
        diag.converged = true;
        done = true;
        break;
      }
      ll = ll_new;
    }

    if (collapsed) {
      if (!opts.use_observed_labels) {
        // reshuffle quantile split for the next attempt
        for (long r = 0; r < n; ++r)
          group[order[r]] = static_cast<int>(rng.next_u64() % H);
        continue;
      }
      throw ComponentCollapse("em_fit_mixture: a component lost all responsibility");
    }
    if (!done && static_cast<int>(diag.loglik_trace.size()) >= opts.max_iter)
      diag.converged = false;

    // label alignment: ascending m_g evaluated at the component intercept
    std::vector<int> perm(H);
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](int a, int b) {
      return mw.components[a].beta[0] < mw.components[b].beta[0];
    });
    MixtureWeightModel sorted = mw;
    for (int g = 0; g < H; ++g) {
      sorted.components[g] = mw.components[perm[g]];
      sorted.alpha.row(g) = mw.alpha.row(perm[g]);
    }
    for (int g = H - 1; g >= 0; --g) sorted.alpha.row(g) -= sorted.alpha.row(0);
    MixtureFitResult out;
    out.model = sorted;
    out.diag = diag;
    if (!diag.converged)
      throw NonConvergence("em_fit_mixture: EM did not converge in " +
                           std::to_string(opts.max_iter) + " iterations");
    return out;
  }
  throw ComponentCollapse("em_fit_mixture: component collapse persisted across " +
                          std::to_string(opts.restarts) + " restarts");
}

/// E(W|x,y) under either weight model; see BetaWeightModel and
/// MixtureWeightModel for the closed forms.
inline double expected_weight_population(const WeightLaw& model,
                                         const Eigen::VectorXd& x, double y) {
  return model.expected_weight_population(x, y);
}

inline double expected_weight_sampled(const WeightLaw& model,
                                      const Eigen::VectorXd& x, double y) {
  return model.expected_weight_sampled(x, y);
}

inline double pi_bar(const WeightLaw& model, const Eigen::VectorXd& x, double y) {
  return model.pi_bar(x, y);
}

}  // namespace isamp
