#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "isamp/quadrature.hpp"
#include "isamp/simulation.hpp"

using namespace isamp;

TEST_CASE("population generation is deterministic in the seed") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S2;
  spec.N = 500;
  spec.seed = 99;
  const auto a = generate_population(spec);
  const auto b = generate_population(spec);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].x[0] == b[i].x[0]);
    REQUIRE(*a[i].y == *b[i].y);
    REQUIRE(*a[i].w == *b[i].w);
  }
  const auto sa = draw_sample(a, spec.seed, 0);
  const auto sb = draw_sample(b, spec.seed, 0);
  for (size_t i = 0; i < sa.size(); ++i) REQUIRE(sa[i].delta == sb[i].delta);
}

TEST_CASE("S1 sample size concentrates at N logistic(-3.2)") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S1;
  spec.N = 5000;
  spec.seed = 7;
  const auto pop = generate_population(spec);
  const auto smp = draw_sample(pop, spec.seed, 0);
  long n = 0;
  for (const auto& r : smp) n += r.delta ? 1 : 0;
  const double p = logistic(-3.2);
  const double want = spec.N * p;  // ~195.8
  const double sd = std::sqrt(spec.N * p * (1.0 - p));
  REQUIRE(std::abs(n - want) <= 4.0 * sd);
}

TEST_CASE("S2 population regression recovers (0, 1, 1)") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S2;
  spec.N = 25000;
  spec.seed = 21;
  const auto pop = generate_population(spec);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : pop) {
    sx += r.x[0];
    sy += *r.y;
    sxx += r.x[0] * r.x[0];
    sxy += r.x[0] * *r.y;
  }
  const double n = static_cast<double>(pop.size());
  const double b = (sxy - sx * sy / n) / (sxx - sx * sx / n);
  const double a = sy / n - b * sx / n;
  double rss = 0;
  for (const auto& r : pop) {
    const double e = *r.y - a - b * r.x[0];
    rss += e * e;
  }
  const double s2 = rss / n;
  // MC standard errors at N=25000: se(b) ~ 1/sqrt(N var(x)) ~ 0.009
  REQUIRE(std::abs(a - 0.0) <= 0.03);
  REQUIRE(std::abs(b - 1.0) <= 0.03);
  REQUIRE(std::abs(s2 - 1.0) <= 0.04);
}

TEST_CASE("draw_sample matches the inclusion probabilities") {
  std::vector<UnitRecord> pop(1000000);
  for (auto& r : pop) {
    r.x = Eigen::VectorXd::Constant(1, 0.0);
    r.has_x = true;
    r.y = 0.0;
    r.w = 2.0;
  }
  const auto smp = draw_sample(pop, 12345, 0);
  long n = 0;
  for (const auto& r : smp) n += r.delta ? 1 : 0;
  REQUIRE(std::abs(n / 1e6 - 0.5) <= 0.002);

  for (auto& r : pop) r.w = 1.0001;
  const auto smp2 = draw_sample(pop, 12345, 1);
  long n2 = 0;
  for (const auto& r : smp2) n2 += r.delta ? 1 : 0;
  REQUIRE(n2 / 1e6 >= 0.999);
}

TEST_CASE("non-sampled records come out stripped") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S4;
  spec.N = 2000;
  spec.seed = 5;
  const auto pop = generate_population(spec);
  const auto smp = draw_sample(pop, spec.seed, 0);
  for (const auto& r : smp) {
    if (r.delta) {
      REQUIRE(r.y.has_value());
      REQUIRE(r.w.has_value());
      REQUIRE(r.stratum.has_value());
    } else {
      REQUIRE_FALSE(r.y.has_value());
      REQUIRE_FALSE(r.w.has_value());
      REQUIRE_FALSE(r.stratum.has_value());
      REQUIRE(r.has_x);
    }
  }
  const auto s2 = emit_setting2(smp);
  for (const auto& r : s2) REQUIRE(r.delta);
}

TEST_CASE("S4 stratum frequencies match the mixture-proportion law") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S4;
  spec.N = 50000;
  spec.seed = 33;
  const auto pop = generate_population(spec);
  double cnt[3] = {0, 0, 0};
  for (const auto& r : pop) cnt[*r.stratum - 1] += 1.0;

  // oracle: E p_g(Y) with Y ~ N(0, 1.5) by dense Gauss-Hermite
  const QuadratureRule rule = gauss_hermite(80);
  double want[3] = {0, 0, 0};
  const double sdy = std::sqrt(1.5);
  for (int k = 0; k < rule.q; ++k) {
    double p[3];
    s4_proportions(sdy * rule.nodes[k], p);
    for (int g = 0; g < 3; ++g) want[g] += rule.weights[k] * p[g];
  }
  for (int g = 0; g < 3; ++g) {
    const double phat = cnt[g] / spec.N;
    const double se = std::sqrt(want[g] * (1.0 - want[g]) / spec.N);
    REQUIRE(std::abs(phat - want[g]) <= 3.5 * se);
  }
}

TEST_CASE("generator moment audit: mean of w^-1 equals E m(x,y)") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S2;
  spec.N = 50000;
  spec.seed = 44;
  const auto pop = generate_population(spec);
  double s1 = 0, s2 = 0;
  for (const auto& r : pop) {
    const double wi = 1.0 / *r.w;
    s1 += wi;
    s2 += wi * wi;
  }
  const double mean = s1 / spec.N;
  const double sd = std::sqrt(s2 / spec.N - mean * mean);

  // E m by nested quadrature: x ~ N(0, 1/2), y|x ~ N(x, 1)
  const QuadratureRule rx = gauss_hermite(40);
  const QuadratureRule ry = gauss_hermite(40);
  double want = 0.0;
  const double sx = std::sqrt(0.5);
  for (int i = 0; i < rx.q; ++i) {
    const double x = sx * rx.nodes[i];
    for (int j = 0; j < ry.q; ++j) {
      const double y = x + ry.nodes[j];
      want += rx.weights[i] * ry.weights[j] * logistic(-3.4 + 0.3 * x + 0.5 * y);
    }
  }
  REQUIRE(std::abs(mean - want) <= 3.0 * sd / std::sqrt(double(spec.N)));
}

TEST_CASE("ht moment is unbiased across replications") {
  // 500 replications of S2 at N=2000; HT mean of y vs E(Y) = 0
  const long reps = 500;
  double sum = 0.0, sum2 = 0.0;
  for (long rep = 0; rep < reps; ++rep) {
    ScenarioSpec spec;
    spec.id = ScenarioId::S2;
    spec.N = 2000;
    spec.seed = 5150;
    spec.stream = rep;
    const auto pop = generate_population(spec);
    const auto smp = draw_sample(pop, spec.seed, spec.stream);
    StudyDesign d;
    d.setting = Setting::One;
    d.n_known = true;
    d.N = spec.N;
    const Dataset ds = validate_dataset(smp, d);
    const double ht =
        ht_moment([](const Eigen::VectorXd&, double y) { return y; }, ds, d, true);
    sum += ht;
    sum2 += ht * ht;
  }
  const double mean = sum / reps;
  const double sd = std::sqrt(sum2 / reps - mean * mean);
  REQUIRE(std::abs(mean - 0.0) <= 3.0 * sd / std::sqrt(double(reps)));
}

TEST_CASE("run_study smoke: full roster on a small S2 study") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S2;
  spec.N = 2000;
  spec.seed = 61;
  StudyConfig cfg;
  const StudySummary sum = run_study(spec, 3, cfg);
  REQUIRE(sum.labels.size() == 9);
  REQUIRE_FALSE(sum.aborted);
  for (int e = 0; e < 9; ++e) {
    REQUIRE(sum.failures[e] == 0);
    for (int k = 0; k < 3; ++k) {
      if (sum.labels[e].rfind("eff-reg", 0) == 0 && k == 2) {
        REQUIRE(std::isnan(sum.mean(e, k)));
        continue;
      }
      REQUIRE(std::isfinite(sum.mean(e, k)));
      REQUIRE(sum.coverage(e, k) >= 0.0);
      REQUIRE(sum.coverage(e, k) <= 1.0);
    }
  }
}

TEST_CASE("run_study is bit-identical across reruns and thread counts") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S1;
  spec.N = 3000;
  spec.seed = 77;
  StudyConfig cfg;
  cfg.estimators = {"cc", "ht", "eff-out-10"};
  const StudySummary a = run_study(spec, 4, cfg);
  const StudySummary b = run_study(spec, 4, cfg);
  StudyConfig cfg2 = cfg;
  cfg2.threads = 3;
  const StudySummary c = run_study(spec, 4, cfg2);
  for (long r = 0; r < 4; ++r)
    for (size_t e = 0; e < cfg.estimators.size(); ++e)
      for (int k = 0; k < 3; ++k) {
        const bool nan_a = std::isnan(a.cells[r][e].est[k]);
        REQUIRE(nan_a == std::isnan(b.cells[r][e].est[k]));
        REQUIRE(nan_a == std::isnan(c.cells[r][e].est[k]));
        if (!nan_a) {
          REQUIRE(a.cells[r][e].est[k] == b.cells[r][e].est[k]);
          REQUIRE(a.cells[r][e].est[k] == c.cells[r][e].est[k]);
          REQUIRE(a.cells[r][e].se[k] == c.cells[r][e].se[k]);
        }
      }
}

TEST_CASE("run_study S4 smoke with the mixture fit") {
  ScenarioSpec spec;
  spec.id = ScenarioId::S4;
  spec.N = 4000;
  spec.seed = 88;
  StudyConfig cfg;
  cfg.quad_nodes = 64;
  cfg.estimators = {"cml", "eff-reg-11", "eff-out-11"};
  const StudySummary sum = run_study(spec, 2, cfg);
  REQUIRE_FALSE(sum.aborted);
  for (size_t e = 0; e < cfg.estimators.size(); ++e) REQUIRE(sum.failures[e] == 0);
}
