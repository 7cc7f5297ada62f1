#include "doseopt/toxicity_crm.hpp"

#include <algorithm>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>
#include <sstream>

#include "doseopt/error.hpp"

namespace doseopt::crm {

namespace {

constexpr double kLower = -10.0;
constexpr double kUpper = 10.0;
constexpr int kPanels = 16;
constexpr int kMaxDepth = 12;
constexpr double kPanelTolerance = 1e-13;  // absolute, kernel scaled to max 1
constexpr double kTieTolerance = 1e-12;

// Observations collapsed by level: toxic counts, fully observed non-toxic
// counts, and the individual weights of partially observed non-toxic patients.
struct Prepared {
  std::vector<double> log_skeleton;
  std::vector<double> n_tox;
  std::vector<double> n_full;
  std::vector<std::vector<double>> partial;
  double log_w_tox = 0.0;  // sum of log weights of toxic patients (all 1)
};

Prepared prepare(std::span<const ToxObservation> data, std::span<const double> skeleton) {
  validate_skeleton(skeleton);
  Prepared out;
  const std::size_t J = skeleton.size();
  out.log_skeleton.reserve(J);
  for (double p : skeleton) out.log_skeleton.push_back(std::log(p));
  out.n_tox.assign(J, 0.0);
  out.n_full.assign(J, 0.0);
  out.partial.resize(J);
  for (const auto& obs : data) {
    if (obs.level < 0 || static_cast<std::size_t>(obs.level) >= J)
      throw InputError("toxicity observation has an out-of-range dose level", {"level"});
    const auto j = static_cast<std::size_t>(obs.level);
    const double w = tox_weight(obs);
    if (obs.toxic) {
      out.n_tox[j] += 1.0;
    } else if (w >= 1.0) {
      out.n_full[j] += 1.0;
    } else {
      out.partial[j].push_back(w);
    }
  }
  return out;
}

double log_kernel(double a, const Prepared& d, double prior_sd) {
  const double ea = std::exp(a);
  double ll = -0.5 * (a / prior_sd) * (a / prior_sd);
  for (std::size_t j = 0; j < d.log_skeleton.size(); ++j) {
    const double log_pi = ea * d.log_skeleton[j];
    if (d.n_tox[j] > 0.0) ll += d.n_tox[j] * log_pi;
    if (d.n_full[j] == 0.0 && d.partial[j].empty()) continue;
    const double pi = std::exp(log_pi);
    if (d.n_full[j] > 0.0) ll += d.n_full[j] * std::log1p(-pi);
    for (double w : d.partial[j]) ll += std::log1p(-w * pi);
  }
  return ll;
}

struct Moments {
  double z0 = 0.0, z1 = 0.0, z2 = 0.0;
};

// Kronrod-31 nodes on [-1, 1] with the embedded Gauss-15 weights aligned to them.
struct KronrodRule {
  std::vector<double> x, wk, wg;

  KronrodRule() {
    using K = boost::math::quadrature::gauss_kronrod<double, 31>;
    using G = boost::math::quadrature::gauss<double, 15>;
    const auto& kx = K::abscissa();
    const auto& kw = K::weights();
    const auto& gx = G::abscissa();
    const auto& gw = G::weights();
    for (std::size_t i = 0; i < kx.size(); ++i) {
      double g = 0.0;
      for (std::size_t q = 0; q < gx.size(); ++q)
        if (std::abs(gx[q] - kx[i]) < 1e-14) g = gw[q];
      x.push_back(kx[i]);
      wk.push_back(kw[i]);
      wg.push_back(g);
      if (kx[i] != 0.0) {
        x.push_back(-kx[i]);
        wk.push_back(kw[i]);
        wg.push_back(g);
      }
    }
  }
};

const KronrodRule& kronrod() {
  static const KronrodRule rule;
  return rule;
}

// Adaptive bisection on the zeroth and first moments; the second moment rides along.
template <class F>
void integrate_panel(const F& density, double lo, double hi, int depth, Moments& out) {
  const auto& r = kronrod();
  const double c = 0.5 * (lo + hi), h = 0.5 * (hi - lo);
  Moments k, g;
  for (std::size_t i = 0; i < r.x.size(); ++i) {
    const double a = c + h * r.x[i];
    const double f = density(a);
    k.z0 += r.wk[i] * f;
    k.z1 += r.wk[i] * a * f;
    k.z2 += r.wk[i] * a * a * f;
    g.z0 += r.wg[i] * f;
    g.z1 += r.wg[i] * a * f;
  }
  const double err = h * std::max(std::abs(k.z0 - g.z0), std::abs(k.z1 - g.z1));
  if (err > kPanelTolerance && depth < kMaxDepth) {
    integrate_panel(density, lo, c, depth + 1, out);
    integrate_panel(density, c, hi, depth + 1, out);
    return;
  }
  out.z0 += h * k.z0;
  out.z1 += h * k.z1;
  out.z2 += h * k.z2;
}

}  // namespace

double tox_weight(const ToxObservation& obs) {
  if (!(obs.window > 0.0)) throw InputError("toxicity window must be positive", {"window"});
  if (obs.follow_time < 0.0) throw InputError("follow-up time must be non-negative", {"follow_time"});
  if (obs.toxic) return 1.0;
  return std::min(obs.follow_time / obs.window, 1.0);
}

double tox_prob(double p, double a) { return std::pow(p, std::exp(a)); }

double log_posterior_kernel(double a, std::span<const ToxObservation> data, std::span<const double> skeleton,
                            double prior_sd) {
  return log_kernel(a, prepare(data, skeleton), prior_sd);
}

ToxPosterior fit_tox_posterior(std::span<const ToxObservation> data, std::span<const double> skeleton,
                               double prior_sd) {
  if (!(prior_sd > 0.0)) throw InputError("prior_sd must be positive", {"prior_sd"});
  const Prepared d = prepare(data, skeleton);

  // Shift by the largest log-kernel value on a coarse grid so exp() stays in range.
  double shift = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 400; ++k) {
    const double a = kLower + (kUpper - kLower) * k / 400.0;
    const double v = log_kernel(a, d, prior_sd);
    if (std::isfinite(v)) shift = std::max(shift, v);
  }
  if (!std::isfinite(shift)) throw NumericalError("toxicity posterior kernel is nowhere finite on [-10, 10]");

  Moments m;
  const double width = (kUpper - kLower) / kPanels;
  for (int k = 0; k < kPanels; ++k)
    integrate_panel([&](double a) { return std::exp(log_kernel(a, d, prior_sd) - shift); }, kLower + k * width,
                    kLower + (k + 1) * width, 0, m);
  const double z0 = m.z0, z1 = m.z1, z2 = m.z2;
  if (!std::isfinite(z0) || !std::isfinite(z1) || !(z0 > 0.0)) {
    std::ostringstream msg;
    msg << "toxicity posterior integral not finite (n=" << data.size() << ", Z=" << z0 << ", shift=" << shift
        << ")";
    throw NumericalError(msg.str());
  }

  ToxPosterior post;
  post.mean_a = z1 / z0;
  post.sd_a = std::sqrt(std::max(z2 / z0 - post.mean_a * post.mean_a, 0.0));
  post.n_used = data.size();
  post.probs.reserve(skeleton.size());
  for (double p : skeleton) post.probs.push_back(tox_prob(p, post.mean_a));
  return post;
}

std::vector<ProbInterval> tox_credible_intervals(std::span<const ToxObservation> data,
                                                 std::span<const double> skeleton, double prior_sd,
                                                 double mass) {
  const Prepared d = prepare(data, skeleton);
  constexpr int kGrid = 8001;
  std::vector<double> a(kGrid), logk(kGrid);
  double shift = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < kGrid; ++k) {
    a[k] = kLower + (kUpper - kLower) * k / (kGrid - 1);
    logk[k] = log_kernel(a[k], d, prior_sd);
    shift = std::max(shift, logk[k]);
  }
  std::vector<double> cdf(kGrid, 0.0);
  for (int k = 1; k < kGrid; ++k) {
    cdf[k] = cdf[k - 1] + 0.5 * (std::exp(logk[k] - shift) + std::exp(logk[k - 1] - shift)) * (a[k] - a[k - 1]);
  }
  const double total = cdf.back();
  auto quantile = [&](double q) {
    const double target = q * total;
    auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
    if (it == cdf.begin()) return a.front();
    if (it == cdf.end()) return a.back();
    const auto k = static_cast<std::size_t>(it - cdf.begin());
    const double frac = (target - cdf[k - 1]) / (cdf[k] - cdf[k - 1]);
    return a[k - 1] + frac * (a[k] - a[k - 1]);
  };
  const double a_lo = quantile(0.5 * (1.0 - mass));
  const double a_hi = quantile(0.5 * (1.0 + mass));
  std::vector<ProbInterval> out;
  for (double p : skeleton) out.push_back({tox_prob(p, a_hi), tox_prob(p, a_lo)});
  return out;
}

Level closest_to_target(std::span<const double> probs, double target) {
  if (probs.empty()) throw InputError("no dose levels", {"probs"});
  Level best = 0;
  double best_gap = std::abs(probs[0] - target);
  for (std::size_t j = 1; j < probs.size(); ++j) {
    const double gap = std::abs(probs[j] - target);
    if (gap < best_gap - kTieTolerance) {
      best = static_cast<Level>(j);
      best_gap = gap;
    }
  }
  return best;
}

Level next_dose(std::span<const double> post_probs, double target, std::optional<Level> highest_tried) {
  if (!(target > 0.0 && target < 1.0)) throw InputError("target toxicity must lie in (0,1)", {"p_T"});
  const Level best = closest_to_target(post_probs, target);
  const Level cap = highest_tried ? *highest_tried + 1 : 0;
  return std::min(best, cap);
}

std::vector<Level> acceptable_set(Level mtd, std::size_t num_levels) {
  if (mtd < 0 || static_cast<std::size_t>(mtd) >= num_levels)
    throw InputError("MTD level out of range", {"mtd"});
  std::vector<Level> out;
  for (Level j = 0; j <= mtd; ++j) out.push_back(j);
  return out;
}

}  // namespace doseopt::crm
