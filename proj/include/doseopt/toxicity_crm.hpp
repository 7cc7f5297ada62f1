#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "doseopt/dose_grid.hpp"

// Time-to-event CRM with the one-parameter power model
//   pi_T(p_j, a) = p_j ^ exp(a),   a ~ N(0, prior_sd^2).
namespace doseopt::crm {

struct ToxObservation {
  Level level = 0;
  bool toxic = false;
  double follow_time = 0.0;  // weeks
  double window = 1.0;       // toxicity observation period, weeks
};

struct ToxPosterior {
  double mean_a = 0.0;
  double sd_a = 0.0;
  std::vector<double> probs;  // skeleton_j ^ exp(mean_a)
  std::size_t n_used = 0;
};

// 1 for toxic patients, otherwise the observed fraction of the window.
double tox_weight(const ToxObservation& obs);

double tox_prob(double p, double a);

// Posterior mean of a under the weighted binomial likelihood, by adaptive
// Gauss-Kronrod quadrature over a in [-10, 10].
ToxPosterior fit_tox_posterior(std::span<const ToxObservation> data, std::span<const double> skeleton,
                               double prior_sd);

// Unnormalised log posterior density of a; exposed for diagnostics and oracles.
double log_posterior_kernel(double a, std::span<const ToxObservation> data, std::span<const double> skeleton,
                            double prior_sd);

// Equal-tailed credible interval for every pi_T(p_j, a). The power model is
// monotone in a so the interval maps through the quantiles of a.
struct ProbInterval {
  double lower;
  double upper;
};
std::vector<ProbInterval> tox_credible_intervals(std::span<const ToxObservation> data,
                                                 std::span<const double> skeleton, double prior_sd,
                                                 double mass = 0.95);

// Level whose probability is closest to target; ties go to the lower level.
Level closest_to_target(std::span<const double> probs, double target);

// CRM assignment: closest level, capped one above the highest level tried so far.
// With nothing tried yet the cap is the lowest level.
Level next_dose(std::span<const double> post_probs, double target, std::optional<Level> highest_tried);

std::vector<Level> acceptable_set(Level mtd, std::size_t num_levels);

}  // namespace doseopt::crm
