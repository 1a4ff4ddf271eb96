#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "isamp/quadrature.hpp"
#include "isamp/rng.hpp"
#include "isamp/special.hpp"

using namespace isamp;

TEST_CASE("gauss-hermite weights sum to one") {
  for (int q : {1, 2, 5, 20, 40, 64}) {
    const QuadratureRule r = gauss_hermite(q);
    double s = 0.0;
    for (double w : r.weights) s += w;
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("gauss-hermite integrates normal moments exactly") {
  // degree <= 2Q-1 polynomials; moments of N(0,1): odd 0, even (2k-1)!!
  const QuadratureRule r = gauss_hermite(20);
  double dfact = 1.0;  // (2k-1)!!
  for (int deg = 0; deg <= 39; ++deg) {
    double got = 0.0;
    for (int i = 0; i < r.q; ++i) got += r.weights[i] * std::pow(r.nodes[i], deg);
    if (deg % 2 == 1) {
      REQUIRE(std::abs(got) <= 1e-10 * dfact);
    } else {
      if (deg > 0) dfact *= deg - 1;
      REQUIRE(std::abs(got - dfact) <= 1e-10 * dfact);
    }
  }
}

TEST_CASE("digamma matches finite differences of lgamma") {
  for (double x : {0.07, 0.5, 1.0, 2.31, 7.7, 42.0, 900.0, 31234.5}) {
    const double h = 1e-6 * std::max(1.0, x);
    const double fd = (std::lgamma(x + h) - std::lgamma(x - h)) / (2.0 * h);
    REQUIRE(std::abs(digamma(x) - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("log_beta basics") {
  REQUIRE(std::abs(log_beta(1.0, 2.0) - std::log(0.5)) < 1e-14);
  REQUIRE(std::abs(log_beta(0.5, 0.5) - std::log(M_PI)) < 1e-12);
  REQUIRE_THROWS_AS(log_beta(-1.0, 2.0), DomainError);
}

TEST_CASE("logit/logistic round trip") {
  for (double p : {1e-8, 0.2, 0.5, 0.99}) {
    REQUIRE(std::abs(logistic(logit(p)) - p) < 1e-12);
  }
  REQUIRE_THROWS_AS(logit(1.5), DomainError);
}

TEST_CASE("philox streams are deterministic and distinct") {
  Philox a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  bool same = true, diff_stream = false, diff_seed = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    same = same && va == b.next_u64();
    diff_stream = diff_stream || va != c.next_u64();
    diff_seed = diff_seed || va != d.next_u64();
  }
  REQUIRE(same);
  REQUIRE(diff_stream);
  REQUIRE(diff_seed);
}

TEST_CASE("philox distributions have the right moments") {
  Philox rng(2024, 0);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, sg = 0, sb = 0;
  for (int i = 0; i < n; ++i) {
    su += rng.uniform();
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
    sg += rng.gamma(3.5);
    sb += rng.beta(2.0, 6.0);
  }
  REQUIRE(std::abs(su / n - 0.5) < 0.01);
  REQUIRE(std::abs(sn / n) < 0.01);
  REQUIRE(std::abs(sn2 / n - 1.0) < 0.02);
  REQUIRE(std::abs(sg / n - 3.5) < 0.03);
  REQUIRE(std::abs(sb / n - 0.25) < 0.005);
}

TEST_CASE("philox bernoulli") {
  Philox rng(5, 1);
  int cnt = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) cnt += rng.bernoulli(0.3) ? 1 : 0;
  REQUIRE(std::abs(cnt / static_cast<double>(n) - 0.3) < 0.01);
}
