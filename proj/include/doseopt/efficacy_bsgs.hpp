#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "doseopt/covariates.hpp"
#include "doseopt/dose_grid.hpp"

// Plateau dose-efficacy model
//   pi_E = exp(-exp(alpha0)) * (1 - exp(-exp(alpha1 + sum gamma_lh z_lh) * p))
// with Bayesian sparse group selection over dummy-coded characteristics:
//   xi_h ~ Ber(q_h),  nu_lh | xi_h ~ (1 - xi_h) delta_0 + xi_h Ber(q_lh),
//   gamma_lh | eta_lh ~ (1 - eta_lh) delta_0 + eta_lh slab,  eta_lh = nu_lh xi_h.
namespace doseopt::bsgs {

struct EffObservation {
  Level level = 0;
  IndicatorMask z = 0;
  bool responded = false;
  double follow_time = 0.0;  // weeks
  double window = 1.0;       // efficacy observation period, weeks
};

double eff_weight(const EffObservation& obs);

// Evaluated in the log domain; `linear` is sum gamma_lh z_lh.
double eff_prob(double alpha0, double alpha1, double linear, double scaled_dose);

struct SamplerConfig {
  int chains = 3;
  int iterations = 2000;  // per chain, including burn-in
  int burn_in = 1000;
  double alpha_prior_var = 5.0;
  bool parallel_chains = false;
};

// Stored draws. nu equals eta in every retained draw (nu_lh is forced to 0
// whenever xi_h = 0), so only eta and xi are kept.
class EffPosterior {
 public:
  EffPosterior() = default;
  EffPosterior(std::size_t num_indicators, std::size_t num_groups) : m_(num_indicators), h_(num_groups) {}

  std::size_t size() const { return alpha0_.size(); }
  std::size_t num_indicators() const { return m_; }
  std::size_t num_groups() const { return h_; }

  double alpha0(std::size_t i) const { return alpha0_[i]; }
  double alpha1(std::size_t i) const { return alpha1_[i]; }
  double gamma(std::size_t i, std::size_t k) const { return gamma_[i * m_ + k]; }
  IndicatorMask eta(std::size_t i) const { return eta_[i]; }
  std::uint32_t xi(std::size_t i) const { return xi_[i]; }

  // Sum of gamma over the set bits of z for draw i.
  double linear(std::size_t i, IndicatorMask z) const;
  double prob(std::size_t i, IndicatorMask z, double scaled_dose) const;

  const std::vector<double>& inclusion_probs() const { return inclusion_; }

  void add_draw(double alpha0, double alpha1, std::span<const double> gamma, IndicatorMask eta, std::uint32_t xi);
  // Recomputes inclusion probabilities from the stored draws.
  void finish();

  int n_chains = 0;
  int burn_in = 0;
  IndicatorMask active = 0;
  double acceptance_alpha0 = 0.0;
  double acceptance_alpha1 = 0.0;
  double toggle_rate = 0.0;

 private:
  std::size_t m_ = 0;
  std::size_t h_ = 0;
  std::vector<double> alpha0_, alpha1_, gamma_;
  std::vector<IndicatorMask> eta_;
  std::vector<std::uint32_t> xi_;
  std::vector<double> inclusion_;
};

// Metropolis-within-Gibbs. `active` lists indicators that may enter the model;
// the rest are held at eta = 0. `scaled_doses` gives p for each dose level.
EffPosterior fit_eff_posterior(std::span<const EffObservation> data, const CovariateSchema& schema,
                               std::span<const double> scaled_doses, IndicatorMask active,
                               const SamplerConfig& config, std::uint64_t stream_key);

// Indicators with inclusion probability strictly above threshold.
IndicatorMask select_covariates(const EffPosterior& post, double threshold);

struct ConditionalDraws {
  std::vector<std::size_t> index;
  bool fell_back = false;  // fewer than min_draws qualified; all draws used
};

// Draws with eta = 1 for every indicator in `condition`. Throws
// ConditioningError when no draw qualifies.
ConditionalDraws conditional_draws(const EffPosterior& post, IndicatorMask condition, std::size_t min_draws = 50);

struct ConditionalProbs {
  std::vector<double> probs;
  bool fell_back = false;
};

ConditionalProbs eff_draws_conditional(const EffPosterior& post, IndicatorMask z, double scaled_dose,
                                       IndicatorMask condition);

}  // namespace doseopt::bsgs
