#pragma once

// Independent reference computations used by unit and acceptance tests.
// These deliberately avoid the production code paths.

#include <cmath>
#include <span>
#include <vector>

#include "doseopt/efficacy_bsgs.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace oracle {

// Posterior mean of a by the plain trapezoid rule on [-10, 10].
inline double crm_posterior_mean(std::span<const doseopt::crm::ToxObservation> data,
                                 std::span<const double> skeleton, double prior_sd, int points) {
  std::vector<double> logk(static_cast<std::size_t>(points));
  std::vector<double> w(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    w[i] = data[i].toxic ? 1.0 : std::min(data[i].follow_time / data[i].window, 1.0);
  std::vector<double> pi(skeleton.size());
  double shift = -INFINITY;
  const double h = 20.0 / (points - 1);
  for (int k = 0; k < points; ++k) {
    const double a = -10.0 + h * k;
    double v = -0.5 * a * a / (prior_sd * prior_sd);
    const double e = std::exp(a);
    for (std::size_t j = 0; j < skeleton.size(); ++j) pi[j] = std::pow(skeleton[j], e);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double p = pi[static_cast<std::size_t>(data[i].level)];
      v += data[i].toxic ? std::log(w[i] * p) : std::log(1.0 - w[i] * p);
    }
    logk[static_cast<std::size_t>(k)] = v;
    if (v > shift) shift = v;
  }
  double z0 = 0.0, z1 = 0.0;
  for (int k = 0; k < points; ++k) {
    const double a = -10.0 + h * k;
    const double f = std::exp(logk[static_cast<std::size_t>(k)] - shift) * ((k == 0 || k == points - 1) ? 0.5 : 1.0);
    z0 += f;
    z1 += a * f;
  }
  return z1 / z0;
}

// Exact posterior inclusion probability for a single binary covariate
// (H = 1, C = 2) by enumerating eta in {0, 1} and integrating each branch on
// a tensor trapezoid grid over the standardised parameters.
struct BsgsOneCovariate {
  double alpha_var = 5.0;
  double slab_sd = 5.0;
  doseopt::bsgs::SlabKind slab = doseopt::bsgs::SlabKind::Gaussian;
  double q_group = 0.5;
  double q_level = 0.5;
  int points = 121;     // per dimension
  double half_width = 7.0;  // in prior standard deviations
};

inline double bsgs_inclusion(std::span<const doseopt::bsgs::EffObservation> data, std::span<const double> scaled,
                             const BsgsOneCovariate& cfg) {
  const int n = cfg.points;
  const double h = 2.0 * cfg.half_width / (n - 1);
  std::vector<double> node(static_cast<std::size_t>(n)), wt(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    node[static_cast<std::size_t>(k)] = -cfg.half_width + h * k;
    wt[static_cast<std::size_t>(k)] = h * std::exp(-0.5 * node[static_cast<std::size_t>(k)] *
                                                   node[static_cast<std::size_t>(k)]) /
                                      std::sqrt(2.0 * M_PI) * ((k == 0 || k == n - 1) ? 0.5 : 1.0);
  }
  const double sa = std::sqrt(cfg.alpha_var);

  auto likelihood = [&](double a0, double a1, double g) {
    double ll = 0.0;
    const double plateau = std::exp(-std::exp(a0));
    for (const auto& o : data) {
      const double lin = a1 + ((o.z & 1u) ? g : 0.0);
      const double pi = plateau * (1.0 - std::exp(-std::exp(lin) * scaled[static_cast<std::size_t>(o.level)]));
      const double w = o.responded ? 1.0 : std::min(o.follow_time / o.window, 1.0);
      ll += o.responded ? std::log(pi) : std::log1p(-w * pi);
    }
    return std::exp(ll);
  };

  // Truncated slabs: the half-normal density is twice the normal on one side.
  double m0 = 0.0, m1 = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double a0 = sa * node[static_cast<std::size_t>(i)];
      const double a1 = sa * node[static_cast<std::size_t>(j)];
      const double wij = wt[static_cast<std::size_t>(i)] * wt[static_cast<std::size_t>(j)];
      m0 += wij * likelihood(a0, a1, 0.0);
      double inner = 0.0;
      for (int k = 0; k < n; ++k) {
        const double g = cfg.slab_sd * node[static_cast<std::size_t>(k)];
        double f = wt[static_cast<std::size_t>(k)];
        if (cfg.slab == doseopt::bsgs::SlabKind::TruncatedPositive) f = g < 0 ? 0.0 : (g == 0 ? f : 2.0 * f);
        if (cfg.slab == doseopt::bsgs::SlabKind::TruncatedNegative) f = g > 0 ? 0.0 : (g == 0 ? f : 2.0 * f);
        if (f > 0.0) inner += f * likelihood(a0, a1, g);
      }
      m1 += wij * inner;
    }
  }
  const double prior1 = cfg.q_group * cfg.q_level;
  return prior1 * m1 / (prior1 * m1 + (1.0 - prior1) * m0);
}

}  // namespace oracle
