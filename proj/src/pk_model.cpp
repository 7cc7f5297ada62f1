#include "doseopt/pk_model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>

#include "doseopt/error.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace doseopt::pk {

namespace {

double normal_upper_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

double log_sigma_conditional(double sigma, double quad, int n, const PkPrior& prior) {
  if (!(sigma > 0.0 && sigma < 1.0)) return -INFINITY;
  // n likelihood terms plus the two-dimensional beta prior scale with sigma.
  return -(n + 2) * std::log(sigma) - quad / (2.0 * sigma * sigma) + (prior.a_beta - 1.0) * std::log(sigma) +
         (prior.b_beta - 1.0) * std::log1p(-sigma);
}

double reflect_unit(double x) {
  while (x < 0.0 || x > 1.0) {
    if (x < 0.0) x = -x;
    if (x > 1.0) x = 2.0 - x;
  }
  return x;
}

}  // namespace

PkPrior PkPrior::with_clearance(double mean_clearance) {
  if (!(mean_clearance > 0.0)) throw InputError("mean clearance must be positive", {"mean_clearance"});
  PkPrior p;
  p.mean = {-std::log(mean_clearance), 1.0};
  return p;
}

PkPosterior fit_pk_posterior(std::span<const PkObservation> data, const DoseGrid& grid, const PkPrior& prior,
                             const PkSamplerConfig& config, Engine& rng) {
  if (!(prior.a_beta > 0.0 && prior.b_beta > 0.0)) throw InputError("Beta prior parameters must be positive");
  if (config.draws < 1 || config.burn_in < 0) throw InputError("invalid PK sampler configuration");

  const Eigen::Vector2d m(prior.mean[0], prior.mean[1]);
  Eigen::Matrix2d G;
  G << prior.scale[0], prior.scale[1], prior.scale[2], prior.scale[3];
  if (!G.isApprox(G.transpose())) throw InputError("prior scale G must be symmetric", {"G"});
  Eigen::LLT<Eigen::Matrix2d> g_llt(G);
  if (g_llt.info() != Eigen::Success) throw InputError("prior scale G must be positive definite", {"G"});
  const Eigen::Matrix2d G_inv = g_llt.solve(Eigen::Matrix2d::Identity());

  const int n = static_cast<int>(data.size());
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd v(n);
  std::set<Level> levels;
  for (int i = 0; i < n; ++i) {
    const auto& obs = data[static_cast<std::size_t>(i)];
    if (!(obs.auc > 0.0)) throw InputError("AUC must be positive", {"auc"});
    X(i, 0) = 1.0;
    X(i, 1) = std::log(grid.dosage(obs.level));
    v(i) = std::log(obs.auc);
    levels.insert(obs.level);
  }

  const Eigen::Matrix2d precision = G_inv + X.transpose() * X;
  Eigen::LLT<Eigen::Matrix2d> post_llt(precision);
  const Eigen::Matrix2d post_cov = post_llt.solve(Eigen::Matrix2d::Identity());
  const Eigen::Vector2d post_mean = post_cov * (G_inv * m + X.transpose() * v);
  const Eigen::Matrix2d post_chol = Eigen::LLT<Eigen::Matrix2d>(post_cov).matrixL();

  PkPosterior out;
  out.single_level = levels.size() < 2;
  out.draws.reserve(static_cast<std::size_t>(config.draws));

  double sigma = 0.5;
  double step = config.sigma_step;
  int accepted = 0, accepted_window = 0, window = 0, kept_accepts = 0;
  const int total = config.burn_in + config.draws;
  for (int it = 0; it < total; ++it) {
    const Eigen::Vector2d zeta(standard_normal(rng), standard_normal(rng));
    const Eigen::Vector2d beta = post_mean + sigma * (post_chol * zeta);

    const Eigen::Vector2d dev = beta - m;
    double quad = dev.dot(G_inv * dev);
    if (n > 0) quad += (v - X * beta).squaredNorm();

    const double proposal = reflect_unit(sigma + step * standard_normal(rng));
    const double log_ratio = log_sigma_conditional(proposal, quad, n, prior) -
                             log_sigma_conditional(sigma, quad, n, prior);
    const bool accept = proposal > 0.0 && proposal < 1.0 && std::log(uniform01(rng)) < log_ratio;
    if (accept) {
      sigma = proposal;
      ++accepted;
      ++accepted_window;
      if (it >= config.burn_in) ++kept_accepts;
    }
    if (it < config.burn_in && ++window == 50) {
      const double rate = accepted_window / 50.0;
      if (rate < 0.25) step *= 0.7;
      if (rate > 0.45) step = std::min(step * 1.4, 1.0);
      window = accepted_window = 0;
    }
    if (!std::isfinite(beta[0]) || !std::isfinite(beta[1]) || !std::isfinite(sigma))
      throw NumericalError("PK sampler produced a non-finite draw");
    if (it >= config.burn_in) out.draws.push_back({beta[0], beta[1], sigma});
  }
  out.sigma_acceptance = static_cast<double>(kept_accepts) / config.draws;
  return out;
}

double pk_exceed_prob(const PkPosterior& post, double dosage, double threshold) {
  if (!(threshold > 0.0)) throw InputError("AUC threshold must be positive", {"threshold"});
  if (post.draws.empty()) throw InputError("empty PK posterior");
  const double log_l = std::log(threshold);
  const double log_d = std::log(dosage);
  double sum = 0.0;
  for (const auto& d : post.draws) sum += normal_upper_tail((log_l - d.beta0 - d.beta1 * log_d) / d.sigma);
  return sum / static_cast<double>(post.draws.size());
}

std::vector<double> pk_exceed_probs(const PkPosterior& post, const DoseGrid& grid, double threshold) {
  std::vector<double> out;
  for (std::size_t j = 0; j < grid.size(); ++j) out.push_back(pk_exceed_prob(post, grid.dosage()[j], threshold));
  return out;
}

Level mtd_pk(const PkPosterior& post, const DoseGrid& grid, double threshold, double target) {
  const auto probs = pk_exceed_probs(post, grid, threshold);
  return crm::closest_to_target(probs, target);
}

Level adjust_mtd(Level mtd_tox, Level mtd_pk) {
  if (mtd_tox < 0 || mtd_pk < 0) throw InputError("MTD levels must be valid");
  return std::min(mtd_tox, mtd_pk);
}

}  // namespace doseopt::pk
