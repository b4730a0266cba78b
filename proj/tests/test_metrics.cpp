#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "rankuda/metrics.hpp"
#include "rankuda/rng.hpp"

using namespace rankuda;

namespace {

std::vector<double> random_scores(Rng& rng, int n, bool with_ties) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(0, 1);
  if (with_ties) {
    // Duplicate a handful of values.
    for (int k = 0; k < n / 3; ++k) {
      v[static_cast<std::size_t>(rng.below(n))] = v[static_cast<std::size_t>(rng.below(n))];
    }
  }
  return v;
}

double logistic_ref(const std::array<double, 5>& b, double s) {
  return b[0] * (0.5 - std::exp(-b[1] * (s - b[2]))) + b[3] * s + b[4];
}

}  // namespace

TEST_CASE("srcc") {
  SUBCASE("identical orderings") {
    const std::vector<double> a{0.1, 0.4, 0.7, 0.9};
    const std::vector<double> b{1.0, 2.0, 3.0, 4.0};
    CHECK(srcc(a, b) == doctest::Approx(1.0));
  }
  SUBCASE("reversed orderings") {
    const std::vector<double> a{0.1, 0.4, 0.7, 0.9};
    std::vector<double> b{4.0, 3.0, 2.0, 1.0};
    CHECK(srcc(a, b) == doctest::Approx(-1.0));
  }
  SUBCASE("ties match the rank-then-Pearson oracle") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      const auto a = random_scores(rng, 15, true);
      const auto b = random_scores(rng, 15, true);
      CHECK(srcc(a, b) == doctest::Approx(oracle::srcc(a, b)).epsilon(1e-12));
    }
  }
  SUBCASE("constant vector errors") {
    CHECK_THROWS(srcc(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}));
  }
}

TEST_CASE("krcc") {
  SUBCASE("identical orderings without ties") {
    const std::vector<double> a{0.1, 0.4, 0.7};
    const std::vector<double> b{1.0, 2.0, 3.0};
    CHECK(krcc(a, b) == doctest::Approx(1.0));
  }
  SUBCASE("one discordant pair among three gives one third") {
    const std::vector<double> a{1.0, 2.0, 3.0};
    const std::vector<double> b{1.0, 3.0, 2.0};
    CHECK(krcc(a, b) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("random vectors with ties match the counting oracle") {
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
      const auto a = random_scores(rng, 12, true);
      const auto b = random_scores(rng, 12, true);
      CHECK(krcc(a, b) == doctest::Approx(oracle::krcc(a, b)).epsilon(1e-12));
    }
  }
  SUBCASE("constant vector errors") {
    CHECK_THROWS(krcc(std::vector<double>{2, 2}, std::vector<double>{1, 2}));
  }
}

TEST_CASE("rank correlations are invariant under strictly increasing transforms") {
  Rng rng(7);
  const auto a = random_scores(rng, 14, true);
  const auto b = random_scores(rng, 14, false);
  auto a2 = a;
  for (double& v : a2) v = std::exp(3.0 * v) + 1.0;  // strictly increasing
  auto b2 = b;
  for (double& v : b2) v = std::atan(5.0 * v - 1.0);
  CHECK(srcc(a2, b2) == doctest::Approx(srcc(a, b)).epsilon(1e-12));
  CHECK(krcc(a2, b2) == doctest::Approx(krcc(a, b)).epsilon(1e-12));
}

TEST_CASE("logistic_fit") {
  SUBCASE("recovers a synthesized curve to near machine precision") {
    Rng rng(11);
    const std::array<double, 5> beta{1.4, 2.2, 0.45, 0.3, 0.1};
    std::vector<double> pred(40), truth(40);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = rng.uniform(0, 1);
      truth[i] = logistic_ref(beta, pred[i]);
    }
    const LogisticFit fit = logistic_fit(pred, truth);
    REQUIRE(fit.converged);
    double sse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      sse += (fit.mapped[i] - truth[i]) * (fit.mapped[i] - truth[i]);
    }
    CHECK(std::sqrt(sse / static_cast<double>(pred.size())) < 1e-6);
  }

  SUBCASE("perfect predictions are not made worse than identity") {
    Rng rng(13);
    std::vector<double> v(20);
    for (auto& x : v) x = rng.uniform(0, 1);
    const LogisticFit fit = logistic_fit(v, v);
    double rmse_mapped = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      rmse_mapped += (fit.mapped[i] - v[i]) * (fit.mapped[i] - v[i]);
    }
    rmse_mapped = std::sqrt(rmse_mapped / static_cast<double>(v.size()));
    CHECK(rmse_mapped <= 0.0 + 1e-9);  // raw RMSE is zero here
  }

  SUBCASE("a strictly monotone fitted map preserves SRCC") {
    Rng rng(17);
    std::vector<double> pred(25), truth(25);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = rng.uniform(0, 1);
      truth[i] = 2.0 * pred[i] + 0.3 + 0.05 * rng.normal();
    }
    const LogisticFit fit = logistic_fit(pred, truth);
    REQUIRE(fit.converged);
    // Monotonicity check of the fitted curve over the data range.
    std::vector<double> xs = pred;
    std::sort(xs.begin(), xs.end());
    bool monotone = true;
    for (std::size_t i = 1; i < xs.size(); ++i) {
      if (logistic_ref(fit.beta, xs[i]) <= logistic_ref(fit.beta, xs[i - 1]) &&
          xs[i] > xs[i - 1]) {
        monotone = false;
      }
    }
    if (monotone) {
      CHECK(srcc(fit.mapped, truth) == doctest::Approx(srcc(pred, truth)).epsilon(1e-12));
    }
  }
}

TEST_CASE("evaluate") {
  SUBCASE("perfect predictions give perfect correlations and ~zero errors") {
    Rng rng(19);
    std::vector<double> v(12);
    for (auto& x : v) x = rng.uniform(0, 1);
    const EvalReport r = evaluate(v, v);
    CHECK(r.srcc == doctest::Approx(1.0));
    CHECK(r.krcc == doctest::Approx(1.0));
    CHECK(r.plcc == doctest::Approx(1.0));
    CHECK(r.mae < 1e-9);
    CHECK(r.rmse < 1e-9);
  }

  SUBCASE("every field matches an independent implementation") {
    Rng rng(23);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> pred = random_scores(rng, 20, rep % 2 == 0);
      std::vector<double> truth(20);
      for (std::size_t i = 0; i < truth.size(); ++i) {
        truth[i] = 0.8 * pred[i] + 0.2 * rng.uniform(0, 1);
      }
      const EvalReport r = evaluate(pred, truth);
      CHECK(r.srcc == doctest::Approx(oracle::srcc(pred, truth)).epsilon(1e-10));
      CHECK(r.krcc == doctest::Approx(oracle::krcc(pred, truth)).epsilon(1e-10));
      // PLCC/MAE/RMSE are defined on the logistic-mapped predictions; the
      // oracle recomputes them from the fitted curve independently.
      std::vector<double> mapped(pred.size());
      for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = logistic_ref(r.beta, pred[i]);
      if (!r.fit_converged) mapped = pred;
      CHECK(r.plcc == doctest::Approx(oracle::pearson(mapped, truth)).epsilon(1e-10));
      CHECK(r.mae == doctest::Approx(oracle::mae(mapped, truth)).epsilon(1e-10));
      CHECK(r.rmse == doctest::Approx(oracle::rmse(mapped, truth)).epsilon(1e-10));
      CHECK(r.rmse >= r.mae - 1e-12);
    }
  }

  SUBCASE("jointly permuting predictions and truth changes nothing") {
    Rng rng(29);
    std::vector<double> pred = random_scores(rng, 16, false);
    std::vector<double> truth = random_scores(rng, 16, false);
    const EvalReport a = evaluate(pred, truth);
    std::vector<std::size_t> perm(pred.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> pred2(pred.size()), truth2(truth.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      pred2[i] = pred[perm[i]];
      truth2[i] = truth[perm[i]];
    }
    const EvalReport b = evaluate(pred2, truth2);
    CHECK(a.srcc == doctest::Approx(b.srcc).epsilon(1e-12));
    CHECK(a.krcc == doctest::Approx(b.krcc).epsilon(1e-12));
    CHECK(a.plcc == doctest::Approx(b.plcc).epsilon(1e-9));
    CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-9));
    CHECK(a.rmse == doctest::Approx(b.rmse).epsilon(1e-9));
  }
}
