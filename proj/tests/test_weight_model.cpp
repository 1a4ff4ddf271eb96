#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include "isamp/json_io.hpp"
#include "isamp/rng.hpp"
#include "isamp/weight_model.hpp"

using namespace isamp;

namespace {

const Eigen::VectorXd kNoX(0);

// E(W^k) integrand in u = w^-1 space: u^-k times the Beta(m phi, (1-m) phi)
// density, folded into one exp so endpoint singularities stay finite.
double winv_moment_integrand(double u, double m, double phi, int k) {
  if (!(u > 0.0 && u < 1.0)) return 0.0;
  const double a = m * phi;
  const double b = (1.0 - m) * phi;
  return std::exp((a - 1.0 - k) * std::log(u) + (b - 1.0) * std::log1p(-u) -
                  log_beta(a, b));
}

double winv_density(double u, double m, double phi) {
  return winv_moment_integrand(u, m, phi, 0);
}

double integrate_pos(const std::function<double(double)>& f) {
  boost::math::quadrature::exp_sinh<double> integrator;
  return integrator.integrate(f, 1e-12);
}

// adaptive integration over u = w^-1 in (0,1), singularity-tolerant
double integrate_unit(const std::function<double(double)>& f) {
  boost::math::quadrature::tanh_sinh<double> integrator;
  return integrator.integrate(f, 0.0, 1.0, 1e-12);
}

BetaWeightModel flat_model(double m, double phi) {
  BetaWeightModel model;
  model.use_x = false;
  model.use_y = false;
  model.beta = Eigen::VectorXd::Constant(1, logit(m));
  model.phi = phi;
  return model;
}

WeightFitData sampled_draws(long n, double m, double phi, std::uint64_t seed) {
  // O | delta=1 ~ BetaPrime((1-m)phi, m phi + 1) drawn as a gamma ratio
  Philox rng(seed, 0);
  WeightFitData d;
  d.o.resize(n);
  d.y.resize(n);
  d.X.resize(n, 0);
  for (long i = 0; i < n; ++i) {
    const double g1 = rng.gamma((1.0 - m) * phi);
    const double g2 = rng.gamma(m * phi + 1.0);
    d.o[i] = g1 / g2;
    d.y[i] = 0.0;
  }
  return d;
}

}  // namespace

TEST_CASE("logdensity_sampled_odds closed value") {
  // (1-m)phi = 1, m phi + 1 = 2: density (1+o)^-3 / B(1,2), at o=1: 1/4
  REQUIRE(logdensity_sampled_odds(1.0, 0.5, 2.0) ==
          Catch::Approx(std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("logdensity_sampled_odds integrates to one") {
  const double m = 0.2, phi = 50.0;
  const double total = integrate_pos(
      [&](double o) { return std::exp(logdensity_sampled_odds(o, m, phi)); });
  REQUIRE(std::abs(total - 1.0) <= 1e-8);
}

TEST_CASE("logdensity_sampled_odds boundary and domain") {
  // (1-m)phi > 1: density vanishes at the origin
  REQUIRE(logdensity_sampled_odds(1e-280, 0.2, 50.0) < -500.0);
  REQUIRE_THROWS_AS(logdensity_sampled_odds(-1.0, 0.5, 2.0), DomainError);
  REQUIRE_THROWS_AS(logdensity_sampled_odds(1.0, 1.5, 2.0), DomainError);
  REQUIRE_THROWS_AS(logdensity_sampled_odds(1.0, 0.5, -2.0), DomainError);
}

TEST_CASE("weight moment closed forms") {
  const BetaWeightModel m1 = flat_model(0.5, 3.0);
  REQUIRE(m1.expected_weight_population(kNoX, 0.0) == Catch::Approx(4.0));
  REQUIRE(m1.pi_bar(kNoX, 0.0) == Catch::Approx(0.25));
  const BetaWeightModel m2 = flat_model(0.25, 100.0);
  REQUIRE(m2.expected_weight_population(kNoX, 0.0) == Catch::Approx(99.0 / 24.0));
  const BetaWeightModel m3 = flat_model(0.25, 4.0);  // m*phi = 1
  REQUIRE_THROWS_AS(m3.expected_weight_population(kNoX, 0.0), InfiniteMoment);
  REQUIRE(m2.expected_weight_sampled(kNoX, 0.0) == Catch::Approx(4.0));
  REQUIRE(flat_model(0.25, 7.0).expected_weight_sampled(kNoX, 0.0) ==
          Catch::Approx(4.0));
  REQUIRE(flat_model(0.5, 9.0).expected_weight_sampled(kNoX, 0.0) ==
          Catch::Approx(2.0));
}

TEST_CASE("single-component mixture collapses to the single model") {
  MixtureWeightModel mix;
  mix.H = 1;
  mix.mix_use_x = false;
  mix.mix_use_y = false;
  mix.alpha.setZero(1, 1);
  mix.components.push_back(flat_model(0.1, 60.0));
  REQUIRE(mix.expected_weight_sampled(kNoX, 0.0) == Catch::Approx(10.0));
  const BetaWeightModel single = flat_model(0.1, 60.0);
  REQUIRE(mix.expected_weight_population(kNoX, 0.0) ==
          Catch::Approx(single.expected_weight_population(kNoX, 0.0)));
  REQUIRE(mix.pi_bar(kNoX, 0.0) == Catch::Approx(single.pi_bar(kNoX, 0.0)));
}

TEST_CASE("moment identities against numeric integration") {
  // E(W), E_s(W) closed forms vs adaptive integration of the beta-prime
  // densities; 200 random admissible (m, phi)
  Philox rng(7011, 0);
  int done = 0;
  while (done < 200) {
    const double m = 0.001 + 0.899 * rng.uniform();
    const double c = 1.05 + 80.0 * rng.uniform();  // m*phi
    const double phi = std::min(c / m, 2e4);
    if (m * phi <= 1.05) continue;
    ++done;
    const BetaWeightModel model = flat_model(m, phi);

    const double ew_closed = model.expected_weight_population(kNoX, 0.0);
    const double ew_num =
        integrate_unit([&](double u) { return winv_moment_integrand(u, m, phi, 1); });
    REQUIRE(std::abs(ew_closed - ew_num) <= 1e-8 * std::abs(ew_num));

    // E_s(W) = 1/E(W^-1): the length-biased tilt, integrated directly
    const double einv_num = integrate_unit(
        [&](double u) { return winv_moment_integrand(u, m, phi, -1); });
    const double es_closed = model.expected_weight_sampled(kNoX, 0.0);
    REQUIRE(std::abs(es_closed - 1.0 / einv_num) <= 1e-8 * es_closed);
  }
}

TEST_CASE("length-bias identity E_s(W) E(W) = E_s(W^2)") {
  // P(delta=1|w) = w^-1 tilts the law of u = w^-1 to Beta(m phi + 1,
  // (1-m) phi); the second sampled moment then factors as
  // E_s(W^2) = E_s(W) E(W), which exists on the whole admissible region.
  Philox rng(7012, 0);
  int done = 0;
  while (done < 50) {
    const double m = 0.01 + 0.9 * rng.uniform();
    const double c = 1.05 + 60.0 * rng.uniform();  // m*phi
    const double phi = std::min(c / m, 2e4);
    if (m * phi <= 1.05) continue;
    ++done;
    const BetaWeightModel model = flat_model(m, phi);
    const double es_w2_num = integrate_unit([&](double u) {
      if (!(u > 0.0 && u < 1.0)) return 0.0;
      const double a = m * phi + 1.0;
      const double b = (1.0 - m) * phi;
      return std::exp((a - 1.0 - 2.0) * std::log(u) + (b - 1.0) * std::log1p(-u) -
                      log_beta(a, b));
    });
    const double prod = model.expected_weight_sampled(kNoX, 0.0) *
                        model.expected_weight_population(kNoX, 0.0);
    REQUIRE(std::abs(prod - es_w2_num) <= 1e-6 * std::abs(es_w2_num));
  }
}

TEST_CASE("mixture moments against numeric integration") {
  Philox rng(7013, 0);
  for (int trial = 0; trial < 30; ++trial) {
    MixtureWeightModel mix;
    mix.H = 3;
    mix.mix_use_x = false;
    mix.mix_use_y = false;
    mix.alpha.setZero(3, 1);
    mix.alpha(1, 0) = rng.normal();
    mix.alpha(2, 0) = rng.normal();
    std::vector<double> ms(3), phis(3);
    for (int g = 0; g < 3; ++g) {
      ms[g] = 0.02 + 0.5 * rng.uniform();
      phis[g] = (1.5 + 40.0 * rng.uniform()) / ms[g];
      mix.components.push_back(flat_model(ms[g], phis[g]));
    }
    Eigen::VectorXd p;
    mix.proportions(kNoX, 0.0, &p);
    const auto popmix_k = [&](double u, int k) {
      double f = 0.0;
      for (int g = 0; g < 3; ++g) f += p[g] * winv_moment_integrand(u, ms[g], phis[g], k);
      return f;
    };
    const double ew_num = integrate_unit([&](double u) { return popmix_k(u, 1); });
    REQUIRE(std::abs(mix.expected_weight_population(kNoX, 0.0) - ew_num) <=
            1e-8 * ew_num);
    const double einv_num = integrate_unit([&](double u) { return popmix_k(u, -1); });
    REQUIRE(std::abs(mix.expected_weight_sampled(kNoX, 0.0) - 1.0 / einv_num) <=
            1e-8 / einv_num);
  }
}

TEST_CASE("analytic score matches finite differences") {
  Philox rng(7014, 0);
  WeightFitData data;
  const long n = 40;
  data.o.resize(n);
  data.y.resize(n);
  data.X.resize(n, 1);
  for (long i = 0; i < n; ++i) {
    data.o[i] = 0.2 + 30.0 * rng.uniform_pos();
    data.y[i] = rng.normal();
    data.X(i, 0) = rng.normal();
  }
  const Eigen::MatrixXd V = detail::link_design(data, true, true);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd params(4);
    params << -1.0 + 2.0 * rng.uniform(), 0.5 * rng.normal(), 0.5 * rng.normal(),
        std::log(2.0 + 100.0 * rng.uniform());
    Eigen::VectorXd grad(4);
    detail::single_loglik(params, V, data.o, std::nullopt, &grad);
    for (int j = 0; j < 4; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(params[j]));
      Eigen::VectorXd pp = params, pm = params;
      pp[j] += h;
      pm[j] -= h;
      const double fd = (detail::single_loglik(pp, V, data.o, std::nullopt, nullptr) -
                         detail::single_loglik(pm, V, data.o, std::nullopt, nullptr)) /
                        (2.0 * h);
      REQUIRE(std::abs(grad[j] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("fit_single recovers the S2-style generator") {
  // logit m = -3.4 + 0.3 x + 0.5 y, phi = 2500, n = 1000 sampled draws
  const double phi = 2500.0;
  Philox rng(515, 0);
  const long n = 1000;
  WeightFitData data;
  data.o.resize(n);
  data.y.resize(n);
  data.X.resize(n, 1);
  const double sd = std::sqrt(0.5);
  for (long i = 0; i < n; ++i) {
    const double x = sd * rng.normal();
    const double z = sd * rng.normal();
    const double y = x - z + sd * rng.normal();
    const double m = logistic(-3.4 + 0.3 * x + 0.5 * y);
    const double g1 = rng.gamma((1.0 - m) * phi);
    const double g2 = rng.gamma(m * phi + 1.0);
    data.o[i] = g1 / g2;
    data.X(i, 0) = x;
    data.y[i] = y;
  }
  const SingleFitResult fit = fit_single(data);
  REQUIRE(fit.diag.converged);
  const Eigen::MatrixXd info = single_fit_observed_information(fit.model, data);
  const Eigen::MatrixXd vcov = info.inverse();
  const Eigen::Vector3d truth(-3.4, 0.3, 0.5);
  for (int j = 0; j < 3; ++j) {
    const double se = std::sqrt(vcov(j, j));
    REQUIRE(std::abs(fit.model.beta[j] - truth[j]) <= 3.0 * se);
  }
  REQUIRE(fit.model.phi / phi >= 0.8);
  REQUIRE(fit.model.phi / phi <= 1.25);
}

TEST_CASE("fit_single covariate-free m matches a bisection oracle") {
  const double phi_fixed = 80.0;
  const WeightFitData data = sampled_draws(400, 0.12, phi_fixed, 616);
  SingleFitOptions opts;
  opts.use_x = false;
  opts.use_y = false;
  opts.fixed_phi = phi_fixed;
  const SingleFitResult fit = fit_single(data, opts);
  const double m_hat = logistic(fit.model.beta[0]);

  // oracle: bisection on the one-dimensional score in m
  const auto score_m = [&](double m) {
    double s = 0.0;
    for (long i = 0; i < data.o.size(); ++i) {
      double dm, dphi;
      detail::sampled_odds_score(data.o[i], m, phi_fixed, &dm, &dphi);
      s += dm;
    }
    return s;
  };
  double lo = 1e-6, hi = 1.0 - 1e-6;
  REQUIRE(score_m(lo) > 0.0);
  REQUIRE(score_m(hi) < 0.0);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (score_m(mid) > 0.0 ? lo : hi) = mid;
    if (hi - lo < 1e-12) break;
  }
  const double m_oracle = 0.5 * (lo + hi);
  REQUIRE(std::abs(m_hat - m_oracle) <= 1e-8);
}

TEST_CASE("fit_single is invariant to affine covariate rescaling") {
  const double phi = 300.0;
  Philox rng(717, 0);
  const long n = 500;
  WeightFitData data;
  data.o.resize(n);
  data.y.resize(n);
  data.X.resize(n, 1);
  for (long i = 0; i < n; ++i) {
    const double x = 2.0 + 0.5 * rng.normal();
    const double y = rng.normal();
    const double m = logistic(-2.0 + 0.4 * (x - 2.0) + 0.3 * y);
    const double g1 = rng.gamma((1.0 - m) * phi);
    const double g2 = rng.gamma(m * phi + 1.0);
    data.o[i] = g1 / g2;
    data.X(i, 0) = x;
    data.y[i] = y;
  }
  const SingleFitResult base = fit_single(data);

  const double c = 2.0, s = 0.5;
  WeightFitData scaled = data;
  for (long i = 0; i < n; ++i) scaled.X(i, 0) = (data.X(i, 0) - c) / s;
  const SingleFitResult alt = fit_single(scaled);
  // map back: eta = b0' + b1' (x-c)/s + b2' y
  const double b1 = alt.model.beta[1] / s;
  const double b0 = alt.model.beta[0] - alt.model.beta[1] * c / s;
  REQUIRE(std::abs(b0 - base.model.beta[0]) <= 1e-8 * std::max(1.0, std::abs(b0)));
  REQUIRE(std::abs(b1 - base.model.beta[1]) <= 1e-8 * std::max(1.0, std::abs(b1)));
  REQUIRE(std::abs(alt.model.beta[2] - base.model.beta[2]) <= 1e-8);
  REQUIRE(std::abs(alt.model.phi - base.model.phi) <= 1e-6 * base.model.phi);
}

TEST_CASE("posterior responsibility basics") {
  MixtureWeightModel mix;
  mix.H = 1;
  mix.mix_use_x = false;
  mix.mix_use_y = false;
  mix.alpha.setZero(1, 1);
  mix.components.push_back(flat_model(0.2, 40.0));
  const Eigen::VectorXd r1 = posterior_responsibility(3.0, kNoX, 0.0, mix);
  REQUIRE(r1.size() == 1);
  REQUIRE(r1[0] == Catch::Approx(1.0));

  MixtureWeightModel sym;
  sym.H = 3;
  sym.mix_use_x = false;
  sym.mix_use_y = false;
  sym.alpha.setZero(3, 1);
  for (int g = 0; g < 3; ++g) sym.components.push_back(flat_model(0.2, 40.0));
  const Eigen::VectorXd r3 = posterior_responsibility(3.0, kNoX, 0.0, sym);
  for (int g = 0; g < 3; ++g) REQUIRE(r3[g] == Catch::Approx(1.0 / 3.0));

  // support exclusion: component 2 density vanishes near o = 0, component 1
  // diverges there ((1-m)phi < 1)
  MixtureWeightModel two;
  two.H = 2;
  two.mix_use_x = false;
  two.mix_use_y = false;
  two.alpha.setZero(2, 1);
  two.components.push_back(flat_model(0.995, 150.0));  // (1-m)phi = 0.75 < 1
  two.components.push_back(flat_model(0.2, 400.0));    // (1-m)phi = 320
  const Eigen::VectorXd r2 = posterior_responsibility(1.0 + 1e-12, kNoX, 0.0, two);
  REQUIRE(r2[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(r2[1] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("em H=1 equals fit_single") {
  const WeightFitData data = sampled_draws(300, 0.08, 900.0, 818);
  SingleFitOptions sopts;
  sopts.use_x = false;
  sopts.use_y = false;
  const SingleFitResult single = fit_single(data, sopts);
  EmOptions em;
  em.mix_use_y = false;
  const MixtureFitResult mix = em_fit_mixture(data, 1, em);
  REQUIRE(std::abs(mix.model.components[0].beta[0] - single.model.beta[0]) <= 1e-8);
  REQUIRE(std::abs(mix.model.components[0].phi - single.model.phi) <=
          1e-6 * single.model.phi);
}

TEST_CASE("em loglik trace is nondecreasing") {
  Philox rng(919, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const long n = 150 + static_cast<long>(rng.next_u64() % 100);
    WeightFitData data;
    data.o.resize(n);
    data.y.resize(n);
    data.X.resize(n, 0);
    for (long i = 0; i < n; ++i) {
      const int g = static_cast<int>(rng.next_u64() % 2);
      const double m = g == 0 ? 0.05 + 0.03 * rng.uniform() : 0.3 + 0.2 * rng.uniform();
      const double phi = g == 0 ? 2000.0 : 300.0;
      const double g1 = rng.gamma((1.0 - m) * phi);
      const double g2 = rng.gamma(m * phi + 1.0);
      data.o[i] = g1 / g2;
      data.y[i] = rng.normal();
    }
    EmOptions em;
    em.mix_use_y = false;
    em.seed = 1000 + trial;
    try {
      const MixtureFitResult fit = em_fit_mixture(data, 2, em);
      const auto& tr = fit.diag.loglik_trace;
      for (size_t k = 1; k < tr.size(); ++k) REQUIRE(tr[k] >= tr[k - 1] - 1e-10);
    } catch (const Error&) {
      // collapse on a degenerate random draw is acceptable here
    }
  }
}

TEST_CASE("em recovers the S4 components") {
  // S4 constants: alpha = (12,-8,10,-4), m = (1/100,1/50,1/5),
  // phi = (30000,10000,5000); proportions depend on y only
  Philox rng(2121, 0);
  const double alpha[4] = {12.0, -8.0, 10.0, -4.0};
  const double m_true[3] = {0.01, 0.02, 0.2};
  const double phi_true[3] = {30000.0, 10000.0, 5000.0};
  const long N = 14000;
  std::vector<double> os, ys;
  const double sd = std::sqrt(0.5);
  for (long i = 0; i < N; ++i) {
    const double x = sd * rng.normal();
    const double z = sd * rng.normal();
    const double y = x - z + sd * rng.normal();
    const double l2 = alpha[0] + alpha[1] * y, l3 = alpha[2] + alpha[3] * y;
    const double mx = std::max({0.0, l2, l3});
    const double e1 = std::exp(-mx), e2 = std::exp(l2 - mx), e3 = std::exp(l3 - mx);
    const double tot = e1 + e2 + e3;
    const double u = rng.uniform() * tot;
    const int g = u < e1 ? 0 : (u < e1 + e2 ? 1 : 2);
    const double g1 = rng.gamma(m_true[g] * phi_true[g]);
    const double g2 = rng.gamma((1.0 - m_true[g]) * phi_true[g]);
    const double w = 1.0 + g2 / g1;
    if (rng.bernoulli(1.0 / w)) {  // Poisson sampling
      os.push_back(w - 1.0);
      ys.push_back(y);
    }
  }
  WeightFitData data;
  data.o = Eigen::Map<Eigen::VectorXd>(os.data(), os.size());
  data.y = Eigen::Map<Eigen::VectorXd>(ys.data(), ys.size());
  data.X.resize(os.size(), 0);
  EmOptions em;
  em.mix_use_y = true;
  em.seed = 4242;
  const MixtureFitResult fit = em_fit_mixture(data, 3, em);
  REQUIRE(fit.diag.converged);
  for (int g = 0; g < 3; ++g) {
    const double m_hat = logistic(fit.model.components[g].beta[0]);
    REQUIRE(std::abs(m_hat - m_true[g]) <= 0.10 * m_true[g]);
  }
}

TEST_CASE("weight model json round trip is bit exact") {
  BetaWeightModel m;
  m.use_x = true;
  m.use_y = true;
  m.beta = Eigen::Vector3d(-3.4 + 1e-13, 0.3000000000000004, 0.5);
  m.phi = 2500.0000000001;
  const auto j = weight_model_to_json(m);
  const auto back = weight_model_from_json(nlohmann::json::parse(j.dump()));
  const auto* bm = dynamic_cast<const BetaWeightModel*>(back.get());
  REQUIRE(bm != nullptr);
  REQUIRE(bm->beta[0] == m.beta[0]);
  REQUIRE(bm->beta[1] == m.beta[1]);
  REQUIRE(bm->beta[2] == m.beta[2]);
  REQUIRE(bm->phi == m.phi);

  MixtureWeightModel mix;
  mix.H = 2;
  mix.mix_use_x = false;
  mix.mix_use_y = true;
  mix.alpha.setZero(2, 2);
  mix.alpha.row(1) << 1.234567890123456789, -0.111;
  mix.components.push_back(m);
  mix.components.push_back(m);
  mix.components[1].use_x = false;
  mix.components[1].use_y = false;
  mix.components[1].beta = Eigen::VectorXd::Constant(1, -2.0);
  const auto j2 = weight_model_to_json(mix);
  const auto back2 = weight_model_from_json(nlohmann::json::parse(j2.dump()));
  const auto* mm = dynamic_cast<const MixtureWeightModel*>(back2.get());
  REQUIRE(mm != nullptr);
  REQUIRE(mm->alpha(1, 0) == mix.alpha(1, 0));
  REQUIRE(mm->components[1].beta[0] == mix.components[1].beta[0]);
  REQUIRE(mm->expected_weight_sampled(kNoX, 0.3) ==
          mix.expected_weight_sampled(kNoX, 0.3));
}
