#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "isamp/config.hpp"
#include "isamp/data.hpp"
#include "isamp/errors.hpp"
#include "isamp/outcome_model.hpp"
#include "isamp/quadrature.hpp"
#include "isamp/targets.hpp"
#include "isamp/weight_model.hpp"

namespace isamp {

struct EstimateResult {
  std::string label;
  Eigen::VectorXd theta_hat;
  Eigen::MatrixXd vcov;  // asymptotic variance of sqrt(N_eff)(theta_hat - theta)
  Eigen::VectorXd se;    // sqrt(diag(vcov) / N_eff)
  int iterations = 0;
  bool converged = false;
  double score_norm = std::numeric_limits<double>::quiet_NaN();
  double n_eff = 0.0;
  long warnings = 0;  // degeneracy fallbacks and quadrature clamps
};

struct SolveOptions {
  double tol_score = 1e-10;  // on ||score_sum|| / n_scale
  double tol_step = 1e-12;
  int max_iter = 80;
  int max_halvings = 40;
};

struct SolveResult {
  Eigen::VectorXd theta;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;  // ||score_sum|| / n_scale at the final iterate
};

/// Damped Newton root finder for score sums, with forward-difference
/// Jacobian (step max(1e-6, 1e-6|theta_j|)) and a halving line search on
/// the score norm. Success is declared on ||score||/n_scale <= tol_score;
/// a frozen step ends the iteration without the success flag.
inline SolveResult solve_estimating_equation(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& score,
    const Eigen::VectorXd& theta0, double n_scale, const SolveOptions& opts = {}) {
  const int q = static_cast<int>(theta0.size());
  SolveResult res;
  Eigen::VectorXd theta = theta0;
  Eigen::VectorXd s = score(theta);
  if (!s.allFinite()) throw NonFiniteIntegrand("solve: score non-finite at theta0");
  double snorm = s.norm();

  for (int it = 0; it < opts.max_iter; ++it) {
    res.iterations = it;
    if (snorm / n_scale <= opts.tol_score) {
      res.converged = true;
      break;
    }
    Eigen::MatrixXd J(q, q);
    for (int j = 0; j < q; ++j) {
      const double h = std::max(1e-6, 1e-6 * std::abs(theta[j]));
      Eigen::VectorXd tj = theta;
      tj[j] += h;
      J.col(j) = (score(tj) - s) / h;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
    if (lu.rank() < q)
      throw SingularJacobian("solve: singular score Jacobian");
    const Eigen::VectorXd dir = lu.solve(-s);
    double t = 1.0;
    bool moved = false;
    Eigen::VectorXd theta_new, s_new;
    for (int hv = 0; hv < opts.max_halvings; ++hv) {
      theta_new = theta + t * dir;
      s_new = score(theta_new);
      if (s_new.allFinite() && s_new.norm() < snorm) {
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
    const double step = (theta_new - theta).lpNorm<Eigen::Infinity>();
    theta = theta_new;
    s = s_new;
    snorm = s.norm();
    if (step <= opts.tol_step * (1.0 + theta.lpNorm<Eigen::Infinity>())) {
      res.converged = snorm / n_scale <= opts.tol_score;
      break;
    }
  }
  res.converged = res.converged || snorm / n_scale <= opts.tol_score;
  res.theta = theta;
  res.score_norm = snorm / n_scale;
  return res;
}

/// One full evaluation of an estimating function: the score sum, the sum of
/// per-unit outer products (for the meat), and the scale N_eff.
struct ScoreEval {
  Eigen::VectorXd sum;
  Eigen::MatrixXd outer;
  double n_eff = 0.0;
  long warnings = 0;
};

/// Sandwich variance (bread^-1 meat bread^-T), with the bread taken as the
/// forward-difference Jacobian of the score sum. Returns the asymptotic
/// variance of sqrt(N_eff)(theta_hat - theta).
inline Eigen::MatrixXd sandwich_variance(
    const std::function<ScoreEval(const Eigen::VectorXd&)>& full,
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& sum_only,
    const Eigen::VectorXd& theta_hat) {
  const int q = static_cast<int>(theta_hat.size());
  const ScoreEval base = full(theta_hat);
  Eigen::MatrixXd J(q, q);
  for (int j = 0; j < q; ++j) {
    const double h = std::max(1e-6, 1e-6 * std::abs(theta_hat[j]));
    Eigen::VectorXd tj = theta_hat;
    tj[j] += h;
    J.col(j) = (sum_only(tj) - base.sum) / h;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
  if (lu.rank() < q) throw SingularBread("sandwich: bread matrix is rank-deficient");
  const Eigen::MatrixXd Jinv = lu.inverse();
  return base.n_eff * (Jinv * base.outer * Jinv.transpose());
}

enum class EffVariant { Setting1, Setting2, NUnknown, NonInformative };

inline EffVariant classify_variant(const StudyDesign& design) {
  if (!design.informative) return EffVariant::NonInformative;
  if (!design.n_known) return EffVariant::NUnknown;
  return design.setting == Setting::One ? EffVariant::Setting1 : EffVariant::Setting2;
}

inline const char* variant_suffix(EffVariant v) {
  switch (v) {
    case EffVariant::Setting1: return "11";
    case EffVariant::Setting2: return "10";
    case EffVariant::NUnknown: return "00";
    case EffVariant::NonInformative: return "ni";
  }
  return "";
}

namespace detail {

inline double known_total(const Dataset& d, const StudyDesign& design) {
  if (!design.n_known || !design.N)
    throw DomainError("estimator requires a known N");
  (void)d;
  return static_cast<double>(*design.N);
}

// Kernel k(theta; x, y) per target: U, mu_dot*eps, or S_theta.
class TargetKernel {
 public:
  TargetKernel(const TargetSpec& t) : t_(&t), q_(target_dim(t)) {}
  int q() const { return q_; }
  void eval(const Eigen::VectorXd& theta, const Eigen::VectorXd& x, double y,
            Eigen::Ref<Eigen::VectorXd> out) const {
    if (const auto* a = std::get_if<EstimatingEquationTarget>(t_)) {
      a->U(theta, x, y, out);
    } else if (const auto* b = std::get_if<RegressionMeanTarget>(t_)) {
      b->mu_dot(x, theta, out);
      out *= y - b->mu(x, theta);
    } else {
      const auto& c = std::get<OutcomeDensityTarget>(*t_);
      c.score(y, x, theta, out);
    }
  }

 private:
  const TargetSpec* t_;
  int q_;
};

}  // namespace detail

/// Weighted estimating-function evaluator behind the CC and HT estimators:
/// sum_i delta_i W_i k(theta; x_i, y_i), with W endogenous (HT) or 1 (CC).
class WeightedScore {
 public:
  WeightedScore(const Dataset& d, const StudyDesign& design, const TargetSpec& target,
                bool use_weights)
      : d_(&d), design_(&design), kernel_(target), use_weights_(use_weights) {}

  double n_eff() const {
    if (!use_weights_) return static_cast<double>(d_->n_sampled);
    return design_->n_known ? detail::known_total(*d_, *design_) : d_->sum_dw;
  }

  Eigen::VectorXd sum(const Eigen::VectorXd& theta) const {
    return eval(theta, false).sum;
  }

  ScoreEval full(const Eigen::VectorXd& theta) const { return eval(theta, true); }

 private:
  ScoreEval eval(const Eigen::VectorXd& theta, bool with_outer) const {
    const int q = kernel_.q();
    ScoreEval ev;
    ev.sum.setZero(q);
    if (with_outer) ev.outer.setZero(q, q);
    ev.n_eff = n_eff();
    Eigen::VectorXd k(q), xi;
    for (long i = 0; i < d_->n_records; ++i) {
      if (!d_->delta[i]) continue;
      xi = d_->X.row(i).transpose();
      kernel_.eval(theta, xi, d_->y[i], k);
      const double wi = use_weights_ ? d_->w[i] : 1.0;
      ev.sum.noalias() += wi * k;
      if (with_outer) ev.outer.noalias() += (wi * k) * (wi * k).transpose();
    }
    return ev;
  }

  const Dataset* d_;
  const StudyDesign* design_;
  detail::TargetKernel kernel_;
  bool use_weights_;
};

/// Conditional-maximum-likelihood score (outcome targets): per sampled unit
/// S_theta(x,y) - E{S_theta pi | x; theta} / E{pi | x; theta}, with
/// pi(x,y) = 1/E_s(W|x,y) from the fitted weight model and the conditional
/// expectations taken against f(y|x; theta) at the current iterate.
class CmlScore {
 public:
  CmlScore(const Dataset& d, const OutcomeDensityTarget& target, const WeightLaw& law,
           const QuadratureRule& rule)
      : d_(&d), target_(&target), law_(&law), rule_(&rule) {}

  double n_eff() const { return static_cast<double>(d_->n_sampled); }

  Eigen::VectorXd sum(const Eigen::VectorXd& theta) const {
    return eval(theta, false).sum;
  }
  ScoreEval full(const Eigen::VectorXd& theta) const { return eval(theta, true); }

 private:
  ScoreEval eval(const Eigen::VectorXd& theta, bool with_outer) const {
    const int q = target_->q;
    ScoreEval ev;
    ev.sum.setZero(q);
    if (with_outer) ev.outer.setZero(q, q);
    ev.n_eff = n_eff();
    std::vector<YNode> nodes;
    Eigen::VectorXd sk(q), si(q), num(q), contrib(q), xi;
    for (long i = 0; i < d_->n_records; ++i) {
      if (!d_->delta[i]) continue;
      xi = d_->X.row(i).transpose();
      target_->law_nodes(theta, xi, *rule_, nodes);
      const int nn = static_cast<int>(nodes.size());
      ybuf_.resize(nn);
      pibuf_.resize(nn);
      sbuf_.resize(static_cast<size_t>(nn) * q);
      for (int k = 0; k < nn; ++k) ybuf_[k] = nodes[k].y;
      law_->sampled_pi_batch(xi, ybuf_.data(), nn, pibuf_.data());
      target_->eval_scores(theta, xi, ybuf_.data(), nn, sbuf_.data(), sk);
      num.setZero();
      double den = 0.0;
      for (int k = 0; k < nn; ++k) {
        const double pw = nodes[k].p * pibuf_[k];
        den += pw;
        num.noalias() += pw * Eigen::Map<const Eigen::VectorXd>(
                                  sbuf_.data() + static_cast<size_t>(k) * q, q);
      }
      if (den < kEpsPi)
        throw DegenerateDenominator("cml: E(pi|x) vanished at a sampled x");
      target_->score(d_->y[i], xi, theta, si);
      contrib = si - num / den;
      ev.sum += contrib;
      if (with_outer) ev.outer.noalias() += contrib * contrib.transpose();
    }
    return ev;
  }

  const Dataset* d_;
  const OutcomeDensityTarget* target_;
  const WeightLaw* law_;
  const QuadratureRule* rule_;
  mutable std::vector<double> ybuf_, pibuf_, sbuf_;
};

/// Efficient score for target (a) (theta defined by E U(theta;X,Y) = 0):
/// delta W U + (1 - delta W) C with
///   Setting 1:  C(x)  = E{(W-1)U | x} / E(W-1 | x)  via the working law,
///   Setting 2:  C     = sum delta U W(W-1) / sum delta W(W-1),
///   N unknown / non-informative: C = 0.
class MeanEffScore {
 public:
  MeanEffScore(const Dataset& d, const StudyDesign& design,
               const EstimatingEquationTarget& target, EffVariant variant,
               const WeightLaw* wlaw, const CondLaw* ylaw)
      : d_(&d), design_(&design), target_(&target), variant_(variant) {
    if (variant == EffVariant::Setting1) {
      if (!wlaw || !ylaw)
        throw DomainError("eff-mean Setting 1 needs weight and working models");
      // cache working-law nodes and clamped E(W|x,y_k) per record
      std::vector<YNode> nodes;
      for (long i = 0; i < d.n_records; ++i) {
        const Eigen::VectorXd xi = d.X.row(i).transpose();
        (*ylaw)(xi, nodes);
        NodeCache c;
        const int nn = static_cast<int>(nodes.size());
        c.y.resize(nn);
        c.pw.resize(nn);
        c.p.resize(nn);
        for (int k = 0; k < nn; ++k) {
          c.y[k] = nodes[k].y;
          c.p[k] = nodes[k].p;
        }
        wlaw->expected_weight_clamped_batch(xi, c.y.data(), nn, c.pw.data(),
                                            &clamp_warnings_);
        cache_.push_back(std::move(c));
      }
    }
    if (variant == EffVariant::Setting2) {
      // theta-free denominator sum delta W(W-1)
      den2_ = 0.0;
      for (long i = 0; i < d.n_records; ++i)
        if (d.delta[i]) den2_ += d.w[i] * (d.w[i] - 1.0);
    }
  }

  double n_eff() const {
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;
    return aug ? detail::known_total(*d_, *design_) : d_->sum_dw;
  }

  long warnings() const { return clamp_warnings_ + fallback_warnings_; }

  Eigen::VectorXd sum(const Eigen::VectorXd& theta) const {
    return eval(theta, false).sum;
  }
  ScoreEval full(const Eigen::VectorXd& theta) const { return eval(theta, true); }

 private:
  struct NodeCache {
    std::vector<double> y, p, pw;
  };

  ScoreEval eval(const Eigen::VectorXd& theta, bool with_outer) const {
    const int q = target_->q;
    ScoreEval ev;
    ev.sum.setZero(q);
    if (with_outer) ev.outer.setZero(q, q);
    ev.n_eff = n_eff();

    Eigen::VectorXd u(q), c2(q), contrib(q), xi;
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;

    if (variant_ == EffVariant::Setting2) {
      c2.setZero();
      if (den2_ > kEpsDenominator * std::max(1.0, d_->sum_dw)) {
        for (long i = 0; i < d_->n_records; ++i) {
          if (!d_->delta[i]) continue;
          xi = d_->X.row(i).transpose();
          target_->U(theta, xi, d_->y[i], u);
          c2.noalias() += (d_->w[i] * (d_->w[i] - 1.0)) * u;
        }
        c2 /= den2_;
      } else {
        ++fallback_warnings_;  // all weights ~ 1: fall back to C = 0
      }
    }

    Eigen::VectorXd cnum(q);
    for (long i = 0; i < d_->n_records; ++i) {
      xi = d_->X.row(i).transpose();
      Eigen::VectorXd ci;
      if (variant_ == EffVariant::Setting1) {
        const NodeCache& c = cache_[i];
        cnum.setZero();
        double cden = 0.0;
        for (size_t k = 0; k < c.y.size(); ++k) {
          target_->U(theta, xi, c.y[k], u);
          const double wk = c.p[k] * (c.pw[k] - 1.0);
          cnum.noalias() += wk * u;
          cden += wk;
        }
        if (std::abs(cden) > kEpsDenominator) {
          ci = cnum / cden;
        } else {
          ci = Eigen::VectorXd::Zero(q);
          ++fallback_warnings_;
        }
      } else if (variant_ == EffVariant::Setting2) {
        ci = c2;
      }

      if (d_->delta[i]) {
        target_->U(theta, xi, d_->y[i], u);
        if (aug)
          contrib = d_->w[i] * u + (1.0 - d_->w[i]) * ci;
        else
          contrib = d_->w[i] * u;
      } else {
        if (!aug) continue;
        contrib = ci;
      }
      ev.sum += contrib;
      if (with_outer) ev.outer.noalias() += contrib * contrib.transpose();
    }
    if (variant_ == EffVariant::Setting2) {
      // units absent from the record list contribute the constant C each
      const double extra = detail::known_total(*d_, *design_) - d_->n_records;
      if (extra > 0.0) {
        ev.sum.noalias() += extra * c2;
        if (with_outer) ev.outer.noalias() += extra * (c2 * c2.transpose());
      }
    }
    ev.warnings = warnings();
    return ev;
  }

  const Dataset* d_;
  const StudyDesign* design_;
  const EstimatingEquationTarget* target_;
  EffVariant variant_;
  std::vector<NodeCache> cache_;
  double den2_ = 0.0;
  mutable long clamp_warnings_ = 0;
  mutable long fallback_warnings_ = 0;
};

/// Efficient score for target (b) (regression mean), built from the
/// conditional moments a0 = E(W-1|x), a1 = E(W eps|x), a2 = E(W eps^2|x)
/// computed against the working law with E(W|x,y) from the weight model:
///   D = A(x) eps,  A(x) = {a1 C + mu_dot} / a2,
///   Setting 1:  C(x) = {a0 - a1^2/a2}^-1 (a1/a2) mu_dot,
///   Setting 2:  C = {E[a0] - E[a1^2/a2]}^-1 E[(a1/a2) mu_dot],
///   N unknown / non-informative: C = 0, D = mu_dot eps / a2.
class RegEffScore {
 public:
  RegEffScore(const Dataset& d, const StudyDesign& design,
              const RegressionMeanTarget& target, EffVariant variant,
              const WeightLaw& wlaw, const CondLaw& ylaw)
      : d_(&d), design_(&design), target_(&target), variant_(variant) {
    have_population_x_ =
        design.n_known && design.N && *design.N == d.n_records;
    // Quadrature collapses to three theta-free moments per record:
    // s0 = E(W|x), s1 = E(W Y|x), s2 = E(W Y^2|x).
    std::vector<YNode> nodes;
    std::vector<double> yb, wb;
    s0_.resize(d.n_records);
    s1_.resize(d.n_records);
    s2_.resize(d.n_records);
    const bool need_all = variant == EffVariant::Setting1 ||
                          (variant == EffVariant::Setting2 && have_population_x_);
    for (long i = 0; i < d.n_records; ++i) {
      if (!need_all && !d.delta[i]) {
        s0_[i] = s1_[i] = s2_[i] = 0.0;
        continue;
      }
      const Eigen::VectorXd xi = d.X.row(i).transpose();
      ylaw(xi, nodes);
      const int nn = static_cast<int>(nodes.size());
      yb.resize(nn);
      wb.resize(nn);
      for (int k = 0; k < nn; ++k) yb[k] = nodes[k].y;
      wlaw.expected_weight_clamped_batch(xi, yb.data(), nn, wb.data(),
                                         &clamp_warnings_);
      double m0 = 0.0, m1 = 0.0, m2 = 0.0;
      for (int k = 0; k < nn; ++k) {
        const double pw = nodes[k].p * wb[k];
        m0 += pw;
        m1 += pw * yb[k];
        m2 += pw * yb[k] * yb[k];
      }
      s0_[i] = m0;
      s1_[i] = m1;
      s2_[i] = m2;
    }
  }

  double n_eff() const {
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;
    return aug ? detail::known_total(*d_, *design_) : d_->sum_dw;
  }

  long warnings() const { return clamp_warnings_ + fallback_warnings_; }

  Eigen::VectorXd sum(const Eigen::VectorXd& theta) const {
    return eval(theta, false).sum;
  }
  ScoreEval full(const Eigen::VectorXd& theta) const { return eval(theta, true); }

 private:
  void moments(long i, double mu, double* a0, double* a1, double* a2) const {
    *a0 = s0_[i] - 1.0;
    *a1 = s1_[i] - mu * s0_[i];
    *a2 = s2_[i] - 2.0 * mu * s1_[i] + mu * mu * s0_[i];
  }

  ScoreEval eval(const Eigen::VectorXd& theta, bool with_outer) const {
    const int q = target_->q;
    ScoreEval ev;
    ev.sum.setZero(q);
    if (with_outer) ev.outer.setZero(q, q);
    ev.n_eff = n_eff();

    Eigen::VectorXd md(q), c2(q), contrib(q), xi;
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;

    if (variant_ == EffVariant::Setting2) {
      // outer expectations: population averages when every unit carries x,
      // HT-weighted sampled means otherwise
      double e_a0 = 0.0, e_ratio = 0.0, norm = 0.0;
      Eigen::VectorXd e_vec = Eigen::VectorXd::Zero(q);
      for (long i = 0; i < d_->n_records; ++i) {
        double wt;
        if (have_population_x_) wt = 1.0;
        else if (d_->delta[i]) wt = d_->w[i];
        else continue;
        xi = d_->X.row(i).transpose();
        const double mu = target_->mu(xi, theta);
        double a0, a1, a2;
        moments(i, mu, &a0, &a1, &a2);
        target_->mu_dot(xi, theta, md);
        e_a0 += wt * a0;
        e_ratio += wt * a1 * a1 / a2;
        e_vec.noalias() += (wt * a1 / a2) * md;
        norm += wt;
      }
      e_a0 /= norm;
      e_ratio /= norm;
      e_vec /= norm;
      const double den = e_a0 - e_ratio;
      if (den <= kEpsDenominator)
        throw CauchySchwarzDegeneracy(
            "eff-reg: Cauchy-Schwarz denominator vanished in the outer expectation",
            std::numeric_limits<double>::quiet_NaN());
      c2 = e_vec / den;
    }

    for (long i = 0; i < d_->n_records; ++i) {
      const bool need = (variant_ == EffVariant::Setting1) || d_->delta[i];
      if (!need) {
        if (variant_ == EffVariant::Setting2) {
          // delta = 0 record in an all-units dataset: contributes C
          ev.sum += c2;
          if (with_outer) ev.outer.noalias() += c2 * c2.transpose();
        }
        continue;
      }
      xi = d_->X.row(i).transpose();
      const double mu = target_->mu(xi, theta);
      double a0, a1, a2;
      moments(i, mu, &a0, &a1, &a2);
      target_->mu_dot(xi, theta, md);

      Eigen::VectorXd ci;
      Eigen::VectorXd Ai(q);
      switch (variant_) {
        case EffVariant::Setting1: {
          const double den = a0 - a1 * a1 / a2;
          if (den <= kEpsDenominator)
            throw CauchySchwarzDegeneracy(
                "eff-reg: Cauchy-Schwarz denominator vanished", xi.size() ? xi[0] : 0.0);
          ci = (a1 / (a2 * den)) * md;
          Ai = (a1 * ci + md) / a2;
          break;
        }
        case EffVariant::Setting2:
          ci = c2;
          Ai = (a1 * ci + md) / a2;
          break;
        case EffVariant::NUnknown:
        case EffVariant::NonInformative:
          Ai = md / a2;
          break;
      }

      if (d_->delta[i]) {
        const double eps = d_->y[i] - mu;
        if (aug)
          contrib = (d_->w[i] * eps) * Ai + (1.0 - d_->w[i]) * ci;
        else
          contrib = (d_->w[i] * eps) * Ai;
      } else {
        contrib = ci;  // Setting 1 population unit
      }
      ev.sum += contrib;
      if (with_outer) ev.outer.noalias() += contrib * contrib.transpose();
    }
    if (variant_ == EffVariant::Setting2) {
      const double extra = detail::known_total(*d_, *design_) - d_->n_records;
      if (extra > 0.0) {
        ev.sum.noalias() += extra * c2;
        if (with_outer) ev.outer.noalias() += extra * (c2 * c2.transpose());
      }
    }
    ev.warnings = warnings();
    return ev;
  }

  const Dataset* d_;
  const StudyDesign* design_;
  const RegressionMeanTarget* target_;
  EffVariant variant_;
  std::vector<double> s0_, s1_, s2_;
  bool have_population_x_ = false;
  mutable long clamp_warnings_ = 0;
  mutable long fallback_warnings_ = 0;
};

/// Efficient score for target (c) (outcome density), with pi_bar = 1/E(W|x,y)
/// and all conditional expectations taken against f(y|x;theta) at the
/// current iterate:
///   D = pi_bar {S - b1/b0} + (1 - pi_bar/b0) C,   b0 = E(pi_bar|x;theta),
///   b1 = E(pi_bar S|x;theta),
///   Setting 1:  C(x) = b1/(b0 - 1),
///   Setting 2:  C = E{b1/b0} / (1 - E{1/b0}),
///   N unknown:  C = 0;  non-informative: D = pi_bar S.
class OutEffScore {
 public:
  OutEffScore(const Dataset& d, const StudyDesign& design,
              const OutcomeDensityTarget& target, EffVariant variant,
              const WeightLaw& wlaw, const QuadratureRule& rule)
      : d_(&d), design_(&design), target_(&target), variant_(variant), wlaw_(&wlaw),
        rule_(&rule) {
    have_population_x_ =
        design.n_known && design.N && *design.N == d.n_records;
  }

  double n_eff() const {
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;
    return aug ? detail::known_total(*d_, *design_) : d_->sum_dw;
  }

  long warnings() const { return clamp_warnings_ + fallback_warnings_; }

  Eigen::VectorXd sum(const Eigen::VectorXd& theta) const {
    return eval(theta, false).sum;
  }
  ScoreEval full(const Eigen::VectorXd& theta) const { return eval(theta, true); }

 private:
  // b0 = E(pi_bar | x; theta), b1 = E(pi_bar S | x; theta)
  void cond_moments(const Eigen::VectorXd& xi, const Eigen::VectorXd& theta,
                    std::vector<YNode>& nodes, Eigen::VectorXd& sk, double* b0,
                    Eigen::VectorXd* b1) const {
    const int q = target_->q;
    target_->law_nodes(theta, xi, *rule_, nodes);
    const int nn = static_cast<int>(nodes.size());
    ybuf_.resize(nn);
    pibuf_.resize(nn);
    sbuf_.resize(static_cast<size_t>(nn) * q);
    for (int k = 0; k < nn; ++k) ybuf_[k] = nodes[k].y;
    wlaw_->pi_bar_clamped_batch(xi, ybuf_.data(), nn, pibuf_.data(),
                                &clamp_warnings_, kEpsPiQuad);
    target_->eval_scores(theta, xi, ybuf_.data(), nn, sbuf_.data(), sk);
    double acc = 0.0;
    double accs[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    if (q <= 8) {
      for (int k = 0; k < nn; ++k) {
        const double pw = nodes[k].p * pibuf_[k];
        acc += pw;
        const double* s = sbuf_.data() + static_cast<size_t>(k) * q;
        for (int j = 0; j < q; ++j) accs[j] += pw * s[j];
      }
      for (int j = 0; j < q; ++j) (*b1)[j] = accs[j];
    } else {
      b1->setZero();
      for (int k = 0; k < nn; ++k) {
        const double pw = nodes[k].p * pibuf_[k];
        acc += pw;
        *b1 += pw * Eigen::Map<const Eigen::VectorXd>(
                        sbuf_.data() + static_cast<size_t>(k) * q, q);
      }
    }
    *b0 = acc;
  }

  ScoreEval eval(const Eigen::VectorXd& theta, bool with_outer) const {
    const int q = target_->q;
    ScoreEval ev;
    ev.sum.setZero(q);
    if (with_outer) ev.outer.setZero(q, q);
    ev.n_eff = n_eff();

    std::vector<YNode> nodes;
    Eigen::VectorXd sk(q), si(q), b1(q), c2(q), contrib(q), xi;
    const bool aug = variant_ == EffVariant::Setting1 || variant_ == EffVariant::Setting2;

    bool c2_zero = false;
    if (variant_ == EffVariant::Setting2) {
      // cache (b0, b1) per record so the contribution pass reuses them
      b0cache_.assign(d_->n_records, 0.0);
      b1cache_.resize(d_->n_records, q);
      Eigen::VectorXd e_ratio = Eigen::VectorXd::Zero(q);
      double e_inv = 0.0, norm = 0.0;
      for (long i = 0; i < d_->n_records; ++i) {
        double wt;
        if (have_population_x_) wt = 1.0;
        else if (d_->delta[i]) wt = d_->w[i];
        else continue;
        xi = d_->X.row(i).transpose();
        double b0;
        cond_moments(xi, theta, nodes, sk, &b0, &b1);
        b0cache_[i] = b0;
        b1cache_.row(i) = b1.transpose();
        e_ratio.noalias() += (wt / b0) * b1;
        e_inv += wt / b0;
        norm += wt;
      }
      e_ratio /= norm;
      e_inv /= norm;
      const double den = 1.0 - e_inv;
      if (std::abs(den) <= kEpsDenominator) {
        c2.setZero();
        c2_zero = true;
        ++fallback_warnings_;
      } else {
        c2 = e_ratio / den;
      }
    }

    for (long i = 0; i < d_->n_records; ++i) {
      const bool need = (variant_ == EffVariant::Setting1) || d_->delta[i];
      if (!need) {
        if (variant_ == EffVariant::Setting2) {
          ev.sum += c2;
          if (with_outer) ev.outer.noalias() += c2 * c2.transpose();
        }
        continue;
      }
      xi = d_->X.row(i).transpose();

      Eigen::VectorXd ci;
      double b0 = 1.0;
      bool unit_noninf = variant_ == EffVariant::NonInformative;
      if (!unit_noninf) {
        if (variant_ == EffVariant::Setting2 && b0cache_[i] != 0.0) {
          b0 = b0cache_[i];
          b1 = b1cache_.row(i).transpose();
        } else {
          cond_moments(xi, theta, nodes, sk, &b0, &b1);
        }
        switch (variant_) {
          case EffVariant::Setting1:
            if (std::abs(b0 - 1.0) < kEpsDenominator) {
              // weights uninformative at this x: non-informative fallback
              unit_noninf = true;
              ci = Eigen::VectorXd::Zero(q);
              ++fallback_warnings_;
            } else {
              ci = b1 / (b0 - 1.0);
            }
            break;
          case EffVariant::Setting2:
            ci = c2;
            break;
          default:
            break;
        }
      }

      if (d_->delta[i]) {
        const double pib = wlaw_->pi_bar_clamped(xi, d_->y[i], &clamp_warnings_);
        target_->score(d_->y[i], xi, theta, si);
        Eigen::VectorXd Di;
        if (unit_noninf) {
          Di = pib * si;
        } else {
          Di = pib * (si - b1 / b0);
          if (aug && !c2_zero) Di.noalias() += (1.0 - pib / b0) * ci;
        }
        if (aug)
          contrib = d_->w[i] * Di + (1.0 - d_->w[i]) * (unit_noninf ? Eigen::VectorXd::Zero(q).eval() : ci);
        else
          contrib = d_->w[i] * Di;
      } else {
        contrib = unit_noninf ? Eigen::VectorXd::Zero(q).eval() : ci;  // Setting 1 population unit
      }
      ev.sum += contrib;
      if (with_outer) ev.outer.noalias() += contrib * contrib.transpose();
    }
    if (variant_ == EffVariant::Setting2) {
      const double extra = detail::known_total(*d_, *design_) - d_->n_records;
      if (extra > 0.0) {
        ev.sum.noalias() += extra * c2;
        if (with_outer) ev.outer.noalias() += extra * (c2 * c2.transpose());
      }
    }
    ev.warnings = warnings();
    return ev;
  }

  const Dataset* d_;
  const StudyDesign* design_;
  const OutcomeDensityTarget* target_;
  EffVariant variant_;
  const WeightLaw* wlaw_;
  const QuadratureRule* rule_;
  bool have_population_x_ = false;
  mutable long clamp_warnings_ = 0;
  mutable long fallback_warnings_ = 0;
  mutable std::vector<double> ybuf_, pibuf_, sbuf_;
  mutable std::vector<double> b0cache_;
  mutable Eigen::MatrixXd b1cache_;
};

namespace detail {

template <typename Score>
EstimateResult run_solver(const Score& sc, const std::string& label,
                          const Eigen::VectorXd& theta0, const SolveOptions& opts) {
  const auto sum_fn = [&sc](const Eigen::VectorXd& t) { return sc.sum(t); };
  const auto full_fn = [&sc](const Eigen::VectorXd& t) { return sc.full(t); };
  const SolveResult sol = solve_estimating_equation(sum_fn, theta0, sc.n_eff(), opts);
  EstimateResult res;
  res.label = label;
  res.theta_hat = sol.theta;
  res.iterations = sol.iterations;
  res.converged = sol.converged;
  res.score_norm = sol.score_norm;
  res.n_eff = sc.n_eff();
  res.vcov = sandwich_variance(full_fn, sum_fn, sol.theta);
  res.se = (res.vcov.diagonal() / res.n_eff).cwiseSqrt();
  return res;
}

}  // namespace detail

/// Complete-case estimator: the weighted estimating equation with W = 1.
inline EstimateResult estimate_cc(const Dataset& d, const StudyDesign& design,
                                  const TargetSpec& target,
                                  const Eigen::VectorXd& theta0,
                                  const SolveOptions& opts = {}) {
  WeightedScore sc(d, design, target, false);
  return detail::run_solver(sc, "cc", theta0, opts);
}

/// Horvitz-Thompson estimator: root of sum delta W k(theta) = 0.
inline EstimateResult estimate_ht(const Dataset& d, const StudyDesign& design,
                                  const TargetSpec& target,
                                  const Eigen::VectorXd& theta0,
                                  const SolveOptions& opts = {}) {
  WeightedScore sc(d, design, target, true);
  return detail::run_solver(sc, "ht", theta0, opts);
}

/// Conditional maximum likelihood with a fitted weight model.
inline EstimateResult estimate_cml(const Dataset& d, const StudyDesign& design,
                                   const TargetSpec& target, const WeightLaw& wlaw,
                                   const QuadratureRule& rule,
                                   const Eigen::VectorXd& theta0,
                                   const SolveOptions& opts = {}) {
  (void)design;
  const auto* out = std::get_if<OutcomeDensityTarget>(&target);
  if (!out) throw DomainError("estimate_cml requires an outcome-density target");
  CmlScore sc(d, *out, wlaw, rule);
  return detail::run_solver(sc, "cml", theta0, opts);
}

/// As estimate_efficient but with an explicit working conditional law for
/// targets (a)/(b) (e.g. a discrete law).
inline EstimateResult estimate_efficient_with_law(
    const Dataset& d, const StudyDesign& design, const TargetSpec& target,
    const WeightLaw& wlaw, const CondLaw* ylaw, const QuadratureRule& rule,
    const Eigen::VectorXd& theta0, const SolveOptions& opts, EffVariant variant) {
  EstimateResult res;
  if (const auto* a = std::get_if<EstimatingEquationTarget>(&target)) {
    MeanEffScore sc(d, design, *a, variant, &wlaw, ylaw);
    res = detail::run_solver(
        sc, std::string("eff-mean-") + variant_suffix(variant), theta0, opts);
    res.warnings = sc.warnings();
  } else if (const auto* b = std::get_if<RegressionMeanTarget>(&target)) {
    if (!ylaw) throw DomainError("eff-reg needs a working conditional law");
    RegEffScore sc(d, design, *b, variant, wlaw, *ylaw);
    res = detail::run_solver(
        sc, std::string("eff-reg-") + variant_suffix(variant), theta0, opts);
    res.warnings = sc.warnings();
  } else {
    const auto& c = std::get<OutcomeDensityTarget>(target);
    OutEffScore sc(d, design, c, variant, wlaw, rule);
    res = detail::run_solver(
        sc, std::string("eff-out-") + variant_suffix(variant), theta0, opts);
    res.warnings = sc.warnings();
  }
  return res;
}

/// Semiparametric-efficient adaptive estimator for any target, dispatching
/// on the target class and the design variant.
inline EstimateResult estimate_efficient(
    const Dataset& d, const StudyDesign& design, const TargetSpec& target,
    const WeightLaw& wlaw, const NormalLinearWorkingModel* working,
    const QuadratureRule& rule, const Eigen::VectorXd& theta0,
    const SolveOptions& opts = {}) {
  const EffVariant variant = classify_variant(design);
  CondLaw ylaw;
  if (working) ylaw = make_normal_law(*working, rule);
  return estimate_efficient_with_law(d, design, target, wlaw, working ? &ylaw : nullptr,
                                     rule, theta0, opts, variant);
}

/// Closed-form optimal mean estimators. Setting 1 augments each unit with
/// the working-law ratio E{y (E(W|x,y)-1)|x} / E{E(W|x,y)-1|x}; Setting 2
/// uses the model-free sampled ratio; with N unknown this is exactly the
/// Horvitz-Thompson mean.
inline EstimateResult estimate_mean_efficient(const Dataset& d,
                                              const StudyDesign& design,
                                              const WeightLaw* wlaw,
                                              const NormalLinearWorkingModel* working,
                                              const QuadratureRule& rule) {
  if (d.n_sampled == 0) throw EmptySample("estimate_mean_efficient: no sampled units");
  const EffVariant variant = classify_variant(design);
  EstimatingEquationTarget tgt = mean_target();
  CondLaw ylaw;
  const CondLaw* ylaw_ptr = nullptr;
  if (working) {
    ylaw = make_normal_law(*working, rule);
    ylaw_ptr = &ylaw;
  }
  MeanEffScore sc(d, design, tgt, variant,
                  wlaw ? wlaw : static_cast<const WeightLaw*>(nullptr), ylaw_ptr);

  // the score is linear in theta: one Newton step from the HT mean is exact
  double ht = 0.0;
  for (long i = 0; i < d.n_records; ++i)
    if (d.delta[i]) ht += d.w[i] * d.y[i];
  ht /= d.sum_dw;
  Eigen::VectorXd theta0(1);
  theta0[0] = ht;
  SolveOptions opts;
  EstimateResult res = detail::run_solver(sc, std::string("eff-mean-") +
                                                  variant_suffix(variant),
                                          theta0, opts);
  res.warnings = sc.warnings();
  return res;
}

/// HT starting values: the closed-form weighted fit for the canonical
/// targets (mean / linear regression / normal-linear outcome).
inline Eigen::VectorXd ht_start(const Dataset& d, const TargetSpec& target,
                                bool weighted = true) {
  if (std::holds_alternative<EstimatingEquationTarget>(target)) {
    double num = 0.0, den = 0.0;
    for (long i = 0; i < d.n_records; ++i)
      if (d.delta[i]) {
        const double wi = weighted ? d.w[i] : 1.0;
        num += wi * d.y[i];
        den += wi;
      }
    Eigen::VectorXd t(1);
    t[0] = num / den;
    return t;
  }
  const NormalLinearWorkingModel wls = fit_gamma_ht(d, weighted);
  if (std::holds_alternative<RegressionMeanTarget>(target)) return wls.coef;
  Eigen::VectorXd t(wls.coef.size() + 1);
  t.head(wls.coef.size()) = wls.coef;
  t[wls.coef.size()] = std::max(wls.sigma2, 1e-12);
  return t;
}

}  // namespace isamp
