#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "doseopt/error.hpp"
#include "doseopt/toxicity_crm.hpp"
#include "oracles.hpp"

using namespace doseopt;
using namespace doseopt::crm;

namespace {
const std::vector<double> kSkeleton{0.05, 0.12, 0.25, 0.38};
const double kPriorSd = std::sqrt(1.34);
}  // namespace

TEST_CASE("tox_weight") {
  CHECK(tox_weight({0, true, 0.5, 4.0}) == 1.0);
  CHECK(tox_weight({0, false, 2.0, 4.0}) == 0.5);
  CHECK(tox_weight({0, false, 6.0, 4.0}) == 1.0);
  CHECK_THROWS_AS(tox_weight({0, false, -1.0, 4.0}), InputError);
  CHECK_THROWS_AS(tox_weight({0, false, 1.0, 0.0}), InputError);
}

TEST_CASE("tox_prob") {
  CHECK(tox_prob(0.25, 0.0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(tox_prob(0.25, std::log(2.0)) == doctest::Approx(0.0625).epsilon(1e-14));
  // 0.12^(e^0.3) evaluated in long double
  const long double ref = std::pow(0.12L, std::exp(0.3L));
  CHECK(std::abs(tox_prob(0.12, 0.3) - static_cast<double>(ref)) < 1e-15);
  CHECK(tox_prob(0.12, 0.3) == doctest::Approx(0.0573).epsilon(1e-3));
}

TEST_CASE("posterior with no data returns the prior") {
  const auto post = fit_tox_posterior({}, kSkeleton, kPriorSd);
  CHECK(std::abs(post.mean_a) < 1e-12);
  for (std::size_t j = 0; j < kSkeleton.size(); ++j) CHECK(post.probs[j] == doctest::Approx(kSkeleton[j]));
  CHECK(post.sd_a == doctest::Approx(kPriorSd).epsilon(1e-6));
}

TEST_CASE("single non-toxic patient matches the fine trapezoid oracle") {
  const std::vector<ToxObservation> data{{0, false, 4.0, 4.0}};
  const auto post = fit_tox_posterior(data, kSkeleton, kPriorSd);
  const double ref = oracle::crm_posterior_mean(data, kSkeleton, kPriorSd, 1'000'001);
  CHECK(std::abs(post.mean_a - ref) < 1e-6);
  CHECK(post.mean_a > 0.0);
}

TEST_CASE("three toxic patients at level 3 shift toxicity upward") {
  const std::vector<ToxObservation> data(3, ToxObservation{2, true, 1.0, 4.0});
  const auto post = fit_tox_posterior(data, kSkeleton, kPriorSd);
  const double ref = oracle::crm_posterior_mean(data, kSkeleton, kPriorSd, 1'000'001);
  CHECK(post.mean_a < 0.0);
  CHECK(ref < 0.0);
  CHECK(std::abs(post.mean_a - ref) < 1e-6);
}

TEST_CASE("randomized datasets agree with the oracle") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 40; ++rep) {
    const int n = 1 + static_cast<int>(rng() % 80);
    std::vector<ToxObservation> data;
    for (int i = 0; i < n; ++i) {
      const Level j = static_cast<Level>(rng() % 4);
      const bool tox = std::uniform_real_distribution<>(0, 1)(rng) < kSkeleton[static_cast<std::size_t>(j)] + 0.1;
      const double t = std::uniform_real_distribution<>(0, 6)(rng);
      data.push_back({j, tox, t, 4.0});
    }
    const auto post = fit_tox_posterior(data, kSkeleton, kPriorSd);
    const double ref = oracle::crm_posterior_mean(data, kSkeleton, kPriorSd, 100'001);
    CHECK(std::abs(post.mean_a - ref) < 1e-5);
    for (std::size_t j = 1; j < post.probs.size(); ++j) CHECK(post.probs[j] > post.probs[j - 1]);
  }
}

TEST_CASE("mean of a grows with nested non-toxic data") {
  std::vector<ToxObservation> data;
  double prev = 0.0;
  for (int n = 1; n <= 30; ++n) {
    data.push_back({n % 4, false, 4.0, 4.0});
    const double a = fit_tox_posterior(data, kSkeleton, kPriorSd).mean_a;
    CHECK(a > prev);
    prev = a;
  }
}

TEST_CASE("next_dose") {
  const std::vector<double> p{0.05, 0.12, 0.25, 0.38};
  CHECK(next_dose(p, 0.25, 3) == 2);
  CHECK(next_dose(p, 0.25, 0) == 1);
  const std::vector<double> tie{0.10, 0.20, 0.30, 0.40};
  CHECK(next_dose(tie, 0.25, 3) == 1);
  CHECK(next_dose(p, 0.25, std::nullopt) == 0);
  const std::vector<double> low{0.01, 0.02, 0.03, 0.04};
  for (Level h = 0; h < 4; ++h) CHECK(next_dose(low, 0.25, h) <= h + 1);
}

TEST_CASE("acceptable_set") {
  CHECK(acceptable_set(2, 4) == std::vector<Level>{0, 1, 2});
  CHECK(acceptable_set(0, 4) == std::vector<Level>{0});
  CHECK(acceptable_set(3, 4) == std::vector<Level>{0, 1, 2, 3});
  CHECK_THROWS_AS(acceptable_set(4, 4), InputError);
}

TEST_CASE("credible intervals bracket the posterior mean probabilities") {
  const std::vector<ToxObservation> data{{0, false, 4, 4}, {1, false, 4, 4}, {2, true, 1, 4}};
  const auto post = fit_tox_posterior(data, kSkeleton, kPriorSd);
  const auto ci = tox_credible_intervals(data, kSkeleton, kPriorSd);
  for (std::size_t j = 0; j < ci.size(); ++j) {
    CHECK(ci[j].lower < post.probs[j]);
    CHECK(ci[j].upper > post.probs[j]);
  }
}
