#pragma once

#include <array>
#include <span>
#include <vector>

#include "doseopt/dose_grid.hpp"
#include "doseopt/rng.hpp"

// Exposure model: log(AUC) ~ N(beta0 + beta1 log(dose), sigma^2) with
// beta | sigma ~ N2(m, sigma^2 G) and sigma ~ Beta(a, b).
namespace doseopt::pk {

struct PkObservation {
  Level level = 0;
  double auc = 0.0;  // mg L / h
};

struct PkPrior {
  std::array<double, 2> mean{0.0, 1.0};
  std::array<double, 4> scale{1000.0, 0.0, 0.0, 1000.0};  // G, row-major
  double a_beta = 1.0;
  double b_beta = 1.0;

  // m = (-log CL, 1), G = diag(1000, 1000), sigma ~ Beta(1, 1).
  static PkPrior with_clearance(double mean_clearance);
};

struct PkSamplerConfig {
  int draws = 4000;
  int burn_in = 1000;
  double sigma_step = 0.1;  // initial reflecting random-walk scale
};

struct PkDraw {
  double beta0;
  double beta1;
  double sigma;
};

struct PkPosterior {
  std::vector<PkDraw> draws;
  double sigma_acceptance = 0.0;
  bool single_level = false;  // beta1 weakly identified: prior dominates
};

// Gibbs: conjugate normal update for beta, reflecting Metropolis for sigma on (0,1).
PkPosterior fit_pk_posterior(std::span<const PkObservation> data, const DoseGrid& grid, const PkPrior& prior,
                             const PkSamplerConfig& config, Engine& rng);

// Posterior mean of P(log AUC > log threshold | dose).
double pk_exceed_prob(const PkPosterior& post, double dosage, double threshold);

std::vector<double> pk_exceed_probs(const PkPosterior& post, const DoseGrid& grid, double threshold);

// Level whose exceedance probability is closest to target (ties low).
Level mtd_pk(const PkPosterior& post, const DoseGrid& grid, double threshold, double target);

Level adjust_mtd(Level mtd_tox, Level mtd_pk);

}  // namespace doseopt::pk
