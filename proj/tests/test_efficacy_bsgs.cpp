#include <bit>
#include <chrono>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "doseopt/efficacy_bsgs.hpp"
#include "doseopt/error.hpp"
#include "doseopt/rng.hpp"
#include "oracles.hpp"

using namespace doseopt;
using namespace doseopt::bsgs;

namespace {

const std::vector<double> kScaled{0.05, 0.12, 0.25, 0.38};

CovariateSchema binary_schema(const std::vector<std::string>& order = {}) {
  Characteristic c;
  c.name = "x";
  c.levels = {"a", "b"};
  c.prevalence = {0.5, 0.5};
  c.response_order = order;
  return CovariateSchema({c});
}

// Data from pi = plateau(level) with an optional shift for z = 1.
std::vector<EffObservation> generate(const CovariateSchema& schema, int n, Engine& rng,
                                     const std::vector<std::vector<double>>& truth_by_code) {
  std::vector<EffObservation> out;
  const auto& ch = schema.characteristics();
  for (int i = 0; i < n; ++i) {
    std::vector<int> lv;
    for (const auto& c : ch) {
      const double u = uniform01(rng);
      double acc = 0.0;
      int l = static_cast<int>(c.levels.size()) - 1;
      for (std::size_t k = 0; k < c.levels.size(); ++k) {
        acc += c.prevalence[k];
        if (u < acc) {
          l = static_cast<int>(k);
          break;
        }
      }
      lv.push_back(l);
    }
    const IndicatorMask z = schema.encode(lv);
    const Level j = i % 4;
    const auto& row = truth_by_code[truth_by_code.size() == 1 ? 0 : (z & 1u)];
    out.push_back({j, z, uniform01(rng) < row[static_cast<std::size_t>(j)], 8.0, 8.0});
  }
  return out;
}

}  // namespace

TEST_CASE("eff_weight and eff_prob") {
  CHECK(eff_weight({0, 0, true, 1.0, 8.0}) == 1.0);
  CHECK(eff_weight({0, 0, false, 4.0, 8.0}) == 0.5);
  CHECK(eff_weight({0, 0, false, 8.0, 8.0}) == 1.0);
  CHECK_THROWS_AS(eff_weight({0, 0, false, -1.0, 8.0}), InputError);
  const double ref = std::exp(-1.0) * (1.0 - std::exp(-0.5));
  CHECK(eff_prob(0.0, 0.0, 0.0, 0.5) == doctest::Approx(ref).epsilon(1e-14));
  CHECK(eff_prob(0.0, 0.0, 0.0, 0.5) == doctest::Approx(0.14475).epsilon(1e-4));
  CHECK(eff_prob(0.3, 0.2, 0.1, 1e-300) < 1e-299);
  CHECK(eff_prob(0.3, 800.0, 0.0, 0.2) == doctest::Approx(std::exp(-std::exp(0.3))));
  for (double p = 0.01; p < 1.0; p += 0.01) CHECK(eff_prob(-0.5, 1.0, 0.3, p) <= eff_prob(-0.5, 1.0, 0.3, p + 0.01));
}

TEST_CASE("prior recovery and hierarchy with no data") {
  const auto schema = motivating_example_schema();
  SamplerConfig cfg;
  cfg.iterations = 6000;
  const auto post = fit_eff_posterior({}, schema, kScaled, schema.all_indicators(), cfg, 11);
  REQUIRE(post.size() == 3u * 5000u);
  for (double q : post.inclusion_probs()) {
    // Autocorrelated draws: allow 3 SE with an effective size of a quarter of the draws.
    const double se = std::sqrt(0.25 * 0.75 / (post.size() / 4.0));
    CHECK(std::abs(q - 0.25) < 3.0 * se);
  }
  for (std::size_t i = 0; i < post.size(); ++i) {
    for (std::size_t k = 0; k < schema.num_indicators(); ++k) {
      const bool on = post.eta(i) & (1u << k);
      const auto& ind = schema.indicators()[k];
      if (on) CHECK(((post.xi(i) >> ind.characteristic) & 1u) == 1u);
      if (!on) CHECK(post.gamma(i, k) == 0.0);
      if (on && ind.slab == SlabKind::TruncatedPositive) CHECK(post.gamma(i, k) >= 0.0);
      if (on && ind.slab == SlabKind::TruncatedNegative) CHECK(post.gamma(i, k) <= 0.0);
    }
  }
}

TEST_CASE("inactive indicators are never included") {
  const auto schema = motivating_example_schema();
  auto rng = make_engine(3, 0, Stream::Test);
  const auto data = generate(schema, 30, rng, {{0.3, 0.5, 0.6, 0.6}});
  const IndicatorMask active = schema.all_indicators() & ~schema.group_mask(2);
  const auto post = fit_eff_posterior(data, schema, kScaled, active, {}, 5);
  for (std::size_t i = 0; i < post.size(); ++i) CHECK((post.eta(i) & ~active) == 0u);
  CHECK(post.inclusion_probs()[2] == 0.0);
  CHECK(post.inclusion_probs()[3] == 0.0);
}

TEST_CASE("enumeration oracle on small datasets") {
  for (const auto& order : {std::vector<std::string>{}, std::vector<std::string>{"a", "b"}}) {
    const auto schema = binary_schema(order);
    oracle::BsgsOneCovariate ocfg;
    ocfg.slab = schema.indicators()[0].slab;
    for (int rep = 0; rep < 3; ++rep) {
      auto rng = make_engine(100 + rep, 0, Stream::Test);
      auto data = generate(schema, 6, rng, {{0.1, 0.2, 0.3, 0.3}, {0.5, 0.8, 0.9, 0.9}});
      data[0].follow_time = 3.0;
      data[0].responded = false;
      SamplerConfig cfg;
      cfg.chains = 4;
      cfg.iterations = 26000;
      cfg.burn_in = 1000;
      const auto post = fit_eff_posterior(data, schema, kScaled, schema.all_indicators(), cfg, 77 + rep);
      const double ref = oracle::bsgs_inclusion(data, kScaled, ocfg);
      CHECK(std::abs(post.inclusion_probs()[0] - ref) < 0.03);
    }
  }
}

TEST_CASE("complete separation stays finite") {
  const auto schema = binary_schema();
  std::vector<EffObservation> data;
  for (int i = 0; i < 6; ++i) data.push_back({i % 4, static_cast<IndicatorMask>(i % 2), i % 2 == 1, 8.0, 8.0});
  const auto post = fit_eff_posterior(data, schema, kScaled, schema.all_indicators(), {}, 9);
  for (std::size_t i = 0; i < post.size(); ++i) {
    CHECK(std::isfinite(post.alpha0(i)));
    CHECK(std::isfinite(post.alpha1(i)));
    CHECK(std::isfinite(post.gamma(i, 0)));
  }
}

TEST_CASE("select_covariates") {
  EffPosterior post(2, 2);
  // Nine draws including indicator 0, one including indicator 1.
  for (int i = 0; i < 10; ++i) {
    const std::vector<double> g{i < 9 ? 1.0 : 0.0, i == 9 ? 1.0 : 0.0};
    post.add_draw(0.0, 0.0, g, i < 9 ? 1u : 2u, 3u);
  }
  post.finish();
  CHECK(select_covariates(post, 0.5) == 1u);
  CHECK(select_covariates(post, 0.9) == 0u);
  CHECK_THROWS_AS(select_covariates(post, 1.0), InputError);
}

TEST_CASE("conditional draws") {
  EffPosterior post(2, 2);
  for (int i = 0; i < 100; ++i) {
    const IndicatorMask eta = i < 60 ? 1u : 0u;
    const std::vector<double> g{eta ? 0.5 : 0.0, 0.0};
    post.add_draw(0.0, 0.0, g, eta, eta ? 1u : 0u);
  }
  post.finish();
  CHECK(conditional_draws(post, 0).index.size() == 100u);
  const auto c = conditional_draws(post, 1u);
  CHECK(c.index.size() == 60u);
  CHECK_FALSE(c.fell_back);
  CHECK_THROWS_AS(conditional_draws(post, 2u), ConditioningError);
  CHECK(conditional_draws(post, 1u, 80).fell_back);
  CHECK(conditional_draws(post, 1u, 80).index.size() == 100u);

  EffPosterior all(1, 1);
  for (int i = 0; i < 60; ++i) all.add_draw(0.1 * i, 0.0, std::vector<double>{0.2}, 1u, 1u);
  all.finish();
  const auto a = eff_draws_conditional(all, 1u, 0.3, 0u);
  const auto b = eff_draws_conditional(all, 1u, 0.3, 1u);
  CHECK(a.probs == b.probs);
}

TEST_CASE("null data rarely selects covariates" * doctest::timeout(600)) {
  const auto schema = motivating_example_schema();
  int below = 0, total = 0, clean_runs = 0;
  const int runs = 20;
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < runs; ++r) {
    auto rng = make_engine(500 + r, 0, Stream::Test);
    const auto data = generate(schema, 60, rng, {{0.3, 0.5, 0.6, 0.6}});
    const auto post = fit_eff_posterior(data, schema, kScaled, schema.all_indicators(), {}, 900 + r);
    bool clean = true;
    for (double q : post.inclusion_probs()) {
      below += q < 0.5;
      ++total;
      clean &= q < 0.5;
    }
    clean_runs += clean;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("null fits: " << below << "/" << total << " covariates below 0.5, " << clean_runs << "/" << runs
                        << " runs with none selected, " << secs / runs << " s per fit");
  CHECK(below >= 0.9 * total);
}
