#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "isamp/data.hpp"
#include "isamp/estimators.hpp"
#include "isamp/rng.hpp"
#include "isamp/special.hpp"
#include "isamp/targets.hpp"
#include "isamp/weight_model.hpp"

namespace isamp {

enum class ScenarioId { S1, S2, S3, S4 };

inline const char* scenario_name(ScenarioId id) {
  switch (id) {
    case ScenarioId::S1: return "S1";
    case ScenarioId::S2: return "S2";
    case ScenarioId::S3: return "S3";
    case ScenarioId::S4: return "S4";
  }
  return "?";
}

/// Generator constants for the four study scenarios. S1-S3 share the single
/// beta weight model at phi = 2500 with scenario-specific logit means; S4 is
/// the three-component stratified mixture.
struct ScenarioSpec {
  ScenarioId id = ScenarioId::S2;
  long N = 25000;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;  // substream (replication index)

  static constexpr double kPhi = 2500.0;
  // S4 constants
  static constexpr double kAlpha[4] = {12.0, -8.0, 10.0, -4.0};
  static constexpr double kM4[3] = {0.01, 0.02, 0.2};
  static constexpr double kPhi4[3] = {30000.0, 10000.0, 5000.0};

  double logit_m(double x, double y, double z) const {
    switch (id) {
      case ScenarioId::S1: return -3.2;
      case ScenarioId::S2: return -3.4 + 0.3 * x + 0.5 * y;
      case ScenarioId::S3: return -3.4 + 0.25 * x + 0.25 * z + 0.1 * y * y;
      case ScenarioId::S4: return 0.0;  // unused; mixture path
    }
    return 0.0;
  }
};

/// Mixture proportions P(G=g | y) of Scenario S4 (component 1 as baseline).
inline void s4_proportions(double y, double p[3]) {
  const double l2 = ScenarioSpec::kAlpha[0] + ScenarioSpec::kAlpha[1] * y;
  const double l3 = ScenarioSpec::kAlpha[2] + ScenarioSpec::kAlpha[3] * y;
  const double mx = std::max({0.0, l2, l3});
  const double e1 = std::exp(0.0 - mx);
  const double e2 = std::exp(l2 - mx);
  const double e3 = std::exp(l3 - mx);
  const double s = e1 + e2 + e3;
  p[0] = e1 / s;
  p[1] = e2 / s;
  p[2] = e3 / s;
}

/// Draws the finite population (x_i, y_i, w_i[, g_i]) of the scenario:
/// x, z ~ N(0, 1/2), y|x,z ~ N(x - z, 1/2), w^-1 ~ Beta(m phi, (1-m) phi).
/// z exists only inside this generator. Records come out with delta = 0.
inline std::vector<UnitRecord> generate_population(const ScenarioSpec& spec) {
  Philox rng(spec.seed, spec.stream * 8 + 0);
  const double sd = std::sqrt(0.5);
  std::vector<UnitRecord> pop(spec.N);
  for (long i = 0; i < spec.N; ++i) {
    const double x = sd * rng.normal();
    const double z = sd * rng.normal();
    const double y = x - z + sd * rng.normal();
    double m, phi;
    int g = -1;
    if (spec.id == ScenarioId::S4) {
      double p[3];
      s4_proportions(y, p);
      const double u = rng.uniform();
      g = u < p[0] ? 0 : (u < p[0] + p[1] ? 1 : 2);
      m = ScenarioSpec::kM4[g];
      phi = ScenarioSpec::kPhi4[g];
    } else {
      m = logistic(spec.logit_m(x, y, z));
      phi = ScenarioSpec::kPhi;
    }
    // w = 1 + g2/g1 keeps w > 1 exactly
    const double g1 = rng.gamma(m * phi);
    const double g2 = rng.gamma((1.0 - m) * phi);
    UnitRecord& r = pop[i];
    r.x = Eigen::VectorXd::Constant(1, x);
    r.has_x = true;
    r.y = y;
    r.w = 1.0 + g2 / g1;
    r.delta = false;
    if (g >= 0) r.stratum = g + 1;
  }
  return pop;
}

/// Poisson sampling: delta_i ~ Bernoulli(w_i^-1) independently. Returns the
/// Setting-1 view: every unit kept, y/w (and stratum) stripped off
/// non-sampled records.
inline std::vector<UnitRecord> draw_sample(const std::vector<UnitRecord>& pop,
                                           std::uint64_t seed, std::uint64_t stream) {
  Philox rng(seed, stream * 8 + 1);
  std::vector<UnitRecord> out(pop.size());
  for (size_t i = 0; i < pop.size(); ++i) {
    out[i] = pop[i];
    const bool take = rng.bernoulli(1.0 / *pop[i].w);
    out[i].delta = take;
    if (!take) {
      out[i].y.reset();
      out[i].w.reset();
      out[i].stratum.reset();
    }
  }
  return out;
}

/// Setting-2 emission: sampled records only (x is unavailable off-sample).
inline std::vector<UnitRecord> emit_setting2(const std::vector<UnitRecord>& sample) {
  std::vector<UnitRecord> out;
  for (const UnitRecord& r : sample)
    if (r.delta) out.push_back(r);
  return out;
}

struct StudyConfig {
  int quad_nodes = 20;
  int threads = 1;
  std::vector<std::string> estimators = {
      "cc",         "ht",         "cml",        "eff-reg-00", "eff-reg-10",
      "eff-reg-11", "eff-out-00", "eff-out-10", "eff-out-11"};
  Eigen::Vector3d true_theta = Eigen::Vector3d(0.0, 1.0, 1.0);
  SolveOptions solve;
  double z_crit = 1.959963984540054;  // nominal 95%
};

/// One estimator's output on one replication; components ordered (a, b,
/// sigma2) with NaN where the estimator does not report a component.
struct RepCell {
  bool ok = false;
  bool converged = false;
  double est[3] = {std::nan(""), std::nan(""), std::nan("")};
  double se[3] = {std::nan(""), std::nan(""), std::nan("")};
};

struct StudySummary {
  std::vector<std::string> labels;
  long reps = 0;
  std::vector<long> failures;           // per estimator
  Eigen::MatrixXd mean, bias, sd, mean_se, coverage;  // estimator x component
  std::vector<std::vector<RepCell>> cells;            // [rep][estimator]
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

inline void run_one_rep(const ScenarioSpec& base, long rep, const StudyConfig& cfg,
                        const QuadratureRule& rule, std::vector<RepCell>* out) {
  ScenarioSpec spec = base;
  spec.stream = static_cast<std::uint64_t>(rep);
  const std::vector<UnitRecord> pop = generate_population(spec);
  const std::vector<UnitRecord> sample = draw_sample(pop, spec.seed, spec.stream);
  const std::vector<UnitRecord> s2records = emit_setting2(sample);

  StudyDesign d1;
  d1.setting = Setting::One;
  d1.n_known = true;
  d1.N = spec.N;
  d1.mechanism = spec.id == ScenarioId::S4 ? Mechanism::Stratified : Mechanism::Poisson;
  d1.strata = spec.id == ScenarioId::S4 ? 3 : 1;

  StudyDesign d2 = d1;
  d2.setting = Setting::Two;

  StudyDesign d2u = d2;
  d2u.n_known = false;
  d2u.N.reset();

  const Dataset ds1 = validate_dataset(sample, d1);
  const Dataset ds2 = validate_dataset(s2records, d2);

  // analysis weight model: single beta-prime regression for S1-S3 (logit m
  // linear in x and y), latent-class mixture for S4
  std::unique_ptr<WeightLaw> wlaw;
  bool weight_ok = true;
  try {
    WeightFitData wfd;
    wfd.o.resize(ds2.n_records);
    wfd.y.resize(ds2.n_records);
    wfd.X.resize(ds2.n_records, ds2.xdim);
    for (long i = 0; i < ds2.n_records; ++i) {
      wfd.o[i] = ds2.w[i] - 1.0;
      wfd.y[i] = ds2.y[i];
      wfd.X.row(i) = ds2.X.row(i);
    }
    if (spec.id == ScenarioId::S4) {
      EmOptions em;
      em.mix_use_y = true;
      em.seed = spec.seed ^ (0x5353u + spec.stream * 8 + 2);
      MixtureFitResult fit = em_fit_mixture(wfd, 3, em);
      wlaw = std::make_unique<MixtureWeightModel>(std::move(fit.model));
    } else {
      SingleFitResult fit = fit_single(wfd);
      wlaw = std::make_unique<BetaWeightModel>(std::move(fit.model));
    }
  } catch (const Error&) {
    weight_ok = false;
  }

  NormalLinearWorkingModel working;
  bool working_ok = true;
  try {
    working = fit_gamma_ht(ds2);
  } catch (const Error&) {
    working_ok = false;
  }

  const OutcomeDensityTarget out_t = normal_linear_outcome_target(1);
  const RegressionMeanTarget reg_t = linear_regression_target(1);
  const TargetSpec out_spec = out_t;
  const TargetSpec reg_spec = reg_t;

  Eigen::VectorXd theta0_out(3), theta0_reg(2);
  if (working_ok) {
    theta0_out << working.coef[0], working.coef[1], std::max(working.sigma2, 1e-8);
    theta0_reg << working.coef[0], working.coef[1];
  }

  out->assign(cfg.estimators.size(), RepCell());
  for (size_t e = 0; e < cfg.estimators.size(); ++e) {
    const std::string& name = cfg.estimators[e];
    RepCell& cell = (*out)[e];
    try {
      EstimateResult r;
      if (name == "cc") {
        if (!working_ok) throw SingularDesign("working fit failed");
        r = estimate_cc(ds2, d2u, out_spec, ht_start(ds2, out_spec, false), cfg.solve);
      } else if (name == "ht") {
        if (!working_ok) throw SingularDesign("working fit failed");
        r = estimate_ht(ds2, d2u, out_spec, theta0_out, cfg.solve);
      } else if (name == "cml") {
        if (!weight_ok || !working_ok) throw NonConvergence("weight fit failed");
        r = estimate_cml(ds2, d2u, out_spec, *wlaw, rule, theta0_out, cfg.solve);
      } else {
        if (!weight_ok || !working_ok) throw NonConvergence("weight fit failed");
        const bool is_reg = name.rfind("eff-reg", 0) == 0;
        const std::string suffix = name.substr(name.size() - 2);
        const Dataset& ds = suffix == "11" ? ds1 : ds2;
        StudyDesign dd = suffix == "11" ? d1 : (suffix == "10" ? d2 : d2u);
        r = estimate_efficient(ds, dd, is_reg ? reg_spec : out_spec, *wlaw, &working,
                               rule, is_reg ? theta0_reg : theta0_out, cfg.solve);
      }
      if (!r.converged) throw NonConvergence("estimator did not converge");
      cell.ok = true;
      cell.converged = r.converged;
      for (int k = 0; k < r.theta_hat.size() && k < 3; ++k) {
        cell.est[k] = r.theta_hat[k];
        cell.se[k] = r.se[k];
      }
    } catch (const Error&) {
      cell.ok = false;
    }
  }
}

}  // namespace detail

/// Replicated study: generate, sample, fit the working models, run every
/// estimator, and aggregate bias / SD / mean SE / 95% coverage per
/// component. Replications use independent RNG substreams keyed by index,
/// so results do not depend on the thread count.
inline StudySummary run_study(const ScenarioSpec& spec, long reps,
                              const StudyConfig& cfg = {}) {
  if (reps < 1) throw DomainError("run_study: reps must be >= 1");
  const QuadratureRule rule = gauss_hermite(cfg.quad_nodes);
  const int E = static_cast<int>(cfg.estimators.size());

  StudySummary sum;
  sum.labels = cfg.estimators;
  sum.reps = reps;
  sum.cells.assign(reps, {});

  const int threads = std::max(1, cfg.threads);
  std::atomic<long> next{0};
  auto worker = [&]() {
    for (;;) {
      const long rep = next.fetch_add(1);
      if (rep >= reps) break;
      detail::run_one_rep(spec, rep, cfg, rule, &sum.cells[rep]);
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  sum.failures.assign(E, 0);
  sum.mean.setZero(E, 3);
  sum.bias.setZero(E, 3);
  sum.sd.setZero(E, 3);
  sum.mean_se.setZero(E, 3);
  sum.coverage.setZero(E, 3);
  for (int e = 0; e < E; ++e) {
    for (int k = 0; k < 3; ++k) {
      double s1 = 0.0, s2 = 0.0, sse = 0.0, cov = 0.0;
      long n = 0;
      for (long r = 0; r < reps; ++r) {
        const RepCell& c = sum.cells[r][e];
        if (!c.ok) continue;
        if (std::isnan(c.est[k])) continue;
        ++n;
        s1 += c.est[k];
        s2 += c.est[k] * c.est[k];
        sse += c.se[k];
        cov += std::abs(c.est[k] - cfg.true_theta[k]) <= cfg.z_crit * c.se[k] ? 1.0 : 0.0;
      }
      if (n > 0) {
        const double m = s1 / n;
        sum.mean(e, k) = m;
        sum.bias(e, k) = m - cfg.true_theta[k];
        sum.sd(e, k) = n > 1 ? std::sqrt((s2 - n * m * m) / (n - 1)) : 0.0;
        sum.mean_se(e, k) = sse / n;
        sum.coverage(e, k) = cov / n;
      } else {
        sum.mean(e, k) = sum.bias(e, k) = sum.sd(e, k) = sum.mean_se(e, k) =
            sum.coverage(e, k) = std::nan("");
      }
    }
    for (long r = 0; r < reps; ++r)
      if (!sum.cells[r][e].ok) ++sum.failures[e];
    if (sum.failures[e] > reps / 10) {
      sum.aborted = true;
      sum.abort_reason = "failure rate above 10% for estimator " + cfg.estimators[e];
    }
  }
  return sum;
}

}  // namespace isamp
