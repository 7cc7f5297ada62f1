#include "doseopt/efficacy_bsgs.hpp"

#include <algorithm>
#include <cmath>
#include <bit>
#include <future>
#include <map>
#include <numbers>

#include "doseopt/error.hpp"
#include "doseopt/rng.hpp"

namespace doseopt::bsgs {

namespace {

constexpr int kAdaptEvery = 50;

// Likelihood sufficient statistics grouped by (dose level, active covariate pattern).
struct Cells {
  std::vector<double> log_dose;
  std::vector<IndicatorMask> z;
  std::vector<double> n_event;
  std::vector<double> n_full;  // non-responders observed for the whole window
  std::vector<std::size_t> partial_begin;
  std::vector<double> partial_w;
  std::vector<std::vector<std::uint32_t>> by_indicator;

  std::size_t size() const { return z.size(); }
};

Cells build_cells(std::span<const EffObservation> data, std::span<const double> scaled_doses, IndicatorMask active,
                  std::size_t num_indicators) {
  std::map<std::pair<Level, IndicatorMask>, std::size_t> index;
  std::vector<std::vector<double>> partial;
  Cells cells;
  for (const auto& obs : data) {
    if (obs.level < 0 || static_cast<std::size_t>(obs.level) >= scaled_doses.size())
      throw InputError("efficacy observation has an out-of-range dose level", {"level"});
    const double w = eff_weight(obs);
    const auto key = std::make_pair(obs.level, obs.z & active);
    auto [it, inserted] = index.try_emplace(key, cells.size());
    if (inserted) {
      cells.log_dose.push_back(std::log(scaled_doses[static_cast<std::size_t>(obs.level)]));
      cells.z.push_back(key.second);
      cells.n_event.push_back(0.0);
      cells.n_full.push_back(0.0);
      partial.emplace_back();
    }
    const std::size_t c = it->second;
    if (obs.responded) {
      cells.n_event[c] += 1.0;
    } else if (w >= 1.0) {
      cells.n_full[c] += 1.0;
    } else if (w > 0.0) {
      partial[c].push_back(w);
    }
  }
  cells.partial_begin.push_back(0);
  for (const auto& p : partial) {
    cells.partial_w.insert(cells.partial_w.end(), p.begin(), p.end());
    cells.partial_begin.push_back(cells.partial_w.size());
  }
  cells.by_indicator.resize(num_indicators);
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (std::size_t k = 0; k < num_indicators; ++k)
      if (cells.z[c] & (IndicatorMask{1} << k)) cells.by_indicator[k].push_back(static_cast<std::uint32_t>(c));
  return cells;
}

struct Slab {
  SlabKind kind;
  double sd;

  double log_density(double g) const {
    if (kind == SlabKind::TruncatedPositive && g < 0.0) return -INFINITY;
    if (kind == SlabKind::TruncatedNegative && g > 0.0) return -INFINITY;
    double v = -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sd) - 0.5 * (g / sd) * (g / sd);
    if (kind != SlabKind::Gaussian) v += std::numbers::ln2;
    return v;
  }

  double sample(Engine& rng) const {
    const double g = sd * standard_normal(rng);
    if (kind == SlabKind::TruncatedPositive) return std::abs(g);
    if (kind == SlabKind::TruncatedNegative) return -std::abs(g);
    return g;
  }
};

struct Model {
  std::size_t m = 0;
  std::size_t h = 0;
  IndicatorMask active = 0;
  std::vector<std::size_t> group;
  std::vector<Slab> slab;
  std::vector<double> q_level;
  std::vector<double> q_group;
  std::vector<IndicatorMask> group_active;
  double alpha_prior_var = 5.0;
};

class Chain {
 public:
  Chain(const Cells& cells, const Model& model, const SamplerConfig& config, Engine rng)
      : cells_(cells), model_(model), config_(config), rng_(std::move(rng)) {
    const std::size_t n = cells_.size();
    dose_.resize(n);
    for (std::size_t c = 0; c < n; ++c) {
      dose_[c] = std::exp(cells_.log_dose[c]);
      total_events_ += cells_.n_event[c];
    }
    explin_.assign(n, 1.0);
    g_.resize(n);
    logg_.assign(n, 0.0);
    ll_.resize(n);
    g_new_.resize(n);
    logg_new_.assign(n, 0.0);
    ll_new_.resize(n);
    gamma_.assign(model_.m, 0.0);
    step_gamma_.assign(model_.m, 0.5);
    acc_gamma_.assign(model_.m, 0);
    att_gamma_.assign(model_.m, 0);

    // Start at alpha = 0 with every admissible indicator included at gamma = 0.
    eta_ = model_.active;
    xi_ = 0;
    for (std::size_t h = 0; h < model_.h; ++h)
      if (model_.group_active[h]) xi_ |= std::uint32_t{1} << h;
    set_alpha0(0.0);
    exp_a1_ = std::exp(a1_);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      eval_cell(c, exp_a1_ * explin_[c] * dose_[c], plateau_, g_[c], logg_[c], ll_[c]);
      s += ll_[c];
    }
    cell_sum_ = s;
    if (!std::isfinite(total_ll())) throw NumericalError("efficacy likelihood is not finite at the initial state");
  }

  void run(EffPosterior& out) {
    long toggles = 0, toggle_attempts = 0;
    long acc0 = 0, acc1 = 0, kept = 0;
    for (int it = 0; it < config_.iterations; ++it) {
      const bool burn = it < config_.burn_in;
      const bool a0_ok = update_alpha0();
      const bool a1_ok = update_alpha1();
      for (std::size_t k = 0; k < model_.m; ++k) {
        const IndicatorMask bit = IndicatorMask{1} << k;
        if (!(model_.active & bit)) continue;
        if ((eta_ & bit) || (xi_ & (std::uint32_t{1} << model_.group[k]))) {
          const int t = toggle(k);
          if (t >= 0) {
            ++toggle_attempts;
            toggles += t;
          }
        }
        if (eta_ & bit) update_gamma(k);
      }
      update_xi();
      if (!std::isfinite(a0_) || !std::isfinite(a1_) || !std::isfinite(total_ll()))
        throw NumericalError("efficacy sampler reached a non-finite state");

      if (burn) {
        if ((it + 1) % kAdaptEvery == 0) adapt();
      } else {
        acc0 += a0_ok;
        acc1 += a1_ok;
        ++kept;
        out.add_draw(a0_, a1_, gamma_, eta_, xi_);
      }
    }
    if (kept > 0) {
      acceptance0 = static_cast<double>(acc0) / kept;
      acceptance1 = static_cast<double>(acc1) / kept;
    }
    toggle_rate = toggle_attempts ? static_cast<double>(toggles) / toggle_attempts : 0.0;
  }

  double acceptance0 = 0.0;
  double acceptance1 = 0.0;
  double toggle_rate = 0.0;

 private:
  double total_ll() const { return total_events_ * log_p_ + cell_sum_; }

  void set_alpha0(double a0) {
    a0_ = a0;
    log_p_ = -std::exp(a0);
    plateau_ = std::exp(log_p_);
  }

  // Cell log-likelihood without the events * log(plateau) term, which is
  // accumulated globally. x = exp(alpha1 + linear) * dose.
  void eval_cell(std::size_t c, double x, double plateau, double& g, double& log_g, double& ll) const {
    g = -std::expm1(-x);
    double v = 0.0;
    if (cells_.n_event[c] > 0.0) {
      log_g = x < 1e-8 ? std::log(x) - 0.5 * x : std::log(g);
      v = cells_.n_event[c] * log_g;
    }
    v += nonevent_ll(c, plateau * g);
    ll = v;
  }

  double nonevent_ll(std::size_t c, double pg) const {
    double v = 0.0;
    if (cells_.n_full[c] > 0.0) v += cells_.n_full[c] * std::log1p(-pg);
    for (std::size_t i = cells_.partial_begin[c]; i < cells_.partial_begin[c + 1]; ++i)
      v += std::log1p(-cells_.partial_w[i] * pg);
    return v;
  }

  double log_alpha_prior(double a) const { return -0.5 * a * a / model_.alpha_prior_var; }

  bool metropolis(double log_ratio) {
    if (!std::isfinite(log_ratio)) return log_ratio > 0.0;
    return log_ratio >= 0.0 || std::log(uniform01(rng_)) < log_ratio;
  }

  bool update_alpha0() {
    ++att0_;
    const double prop = a0_ + step0_ * standard_normal(rng_);
    const double log_p = -std::exp(prop);
    const double plateau = std::exp(log_p);
    double s = 0.0;
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      double v = cells_.n_event[c] > 0.0 ? cells_.n_event[c] * logg_[c] : 0.0;
      v += nonevent_ll(c, plateau * g_[c]);
      ll_new_[c] = v;
      s += v;
    }
    const double new_total = total_events_ * log_p + s;
    if (!metropolis(new_total - total_ll() + log_alpha_prior(prop) - log_alpha_prior(a0_))) return false;
    set_alpha0(prop);
    std::swap(ll_, ll_new_);
    cell_sum_ = s;
    ++acc0_;
    return true;
  }

  bool update_alpha1() {
    ++att1_;
    const double prop = a1_ + step1_ * standard_normal(rng_);
    const double e = std::exp(prop);
    double s = 0.0;
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      eval_cell(c, e * explin_[c] * dose_[c], plateau_, g_new_[c], logg_new_[c], ll_new_[c]);
      s += ll_new_[c];
    }
    if (!metropolis(s - cell_sum_ + log_alpha_prior(prop) - log_alpha_prior(a1_))) return false;
    a1_ = prop;
    exp_a1_ = e;
    std::swap(g_, g_new_);
    std::swap(logg_, logg_new_);
    std::swap(ll_, ll_new_);
    cell_sum_ = s;
    ++acc1_;
    return true;
  }

  // Log-likelihood change when gamma_k moves by delta; new cell values go to scratch.
  double shift_delta(std::size_t k, double delta) {
    const double factor = std::exp(delta);
    double d = 0.0;
    for (std::uint32_t c : cells_.by_indicator[k]) {
      eval_cell(c, exp_a1_ * explin_[c] * factor * dose_[c], plateau_, g_new_[c], logg_new_[c], ll_new_[c]);
      d += ll_new_[c] - ll_[c];
    }
    return d;
  }

  void commit_shift(std::size_t k, double delta, double d_ll) {
    const double factor = std::exp(delta);
    for (std::uint32_t c : cells_.by_indicator[k]) {
      explin_[c] *= factor;
      g_[c] = g_new_[c];
      logg_[c] = logg_new_[c];
      ll_[c] = ll_new_[c];
    }
    cell_sum_ += d_ll;
  }

  bool update_gamma(std::size_t k) {
    ++att_gamma_[k];
    const Slab& slab = model_.slab[k];
    const double prop = gamma_[k] + step_gamma_[k] * standard_normal(rng_);
    const double prior_new = slab.log_density(prop);
    if (!std::isfinite(prior_new)) return false;
    const double delta = prop - gamma_[k];
    const double d_ll = shift_delta(k, delta);
    if (!metropolis(d_ll + prior_new - slab.log_density(gamma_[k]))) return false;
    commit_shift(k, delta, d_ll);
    gamma_[k] = prop;
    ++acc_gamma_[k];
    return true;
  }

  // Add/delete move. Births are proposed with probability q_k (when the group
  // is on) and draw gamma from the slab; deaths with probability 1 - q_k. The
  // prior terms cancel so acceptance is the likelihood ratio alone.
  // Returns -1 when nothing was proposed, else 0/1 for reject/accept.
  int toggle(std::size_t k) {
    const IndicatorMask bit = IndicatorMask{1} << k;
    const bool on = eta_ & bit;
    const double u = uniform01(rng_);
    double target = 0.0;
    if (on) {
      if (u >= 1.0 - model_.q_level[k]) return -1;
    } else {
      if (!(xi_ & (std::uint32_t{1} << model_.group[k])) || u >= model_.q_level[k]) return -1;
      target = model_.slab[k].sample(rng_);
    }
    const double delta = target - gamma_[k];
    const double d_ll = shift_delta(k, delta);
    if (!metropolis(d_ll)) return 0;
    commit_shift(k, delta, d_ll);
    gamma_[k] = target;
    eta_ ^= bit;
    return 1;
  }

  // Group indicators: forced to 1 while any level is in; otherwise drawn from
  // their conditional prior (the likelihood does not depend on xi then).
  void update_xi() {
    for (std::size_t h = 0; h < model_.h; ++h) {
      const std::uint32_t bit = std::uint32_t{1} << h;
      if (!model_.group_active[h]) continue;
      if (eta_ & model_.group_active[h]) {
        xi_ |= bit;
        continue;
      }
      double p_on = model_.q_group[h];
      for (std::size_t k = 0; k < model_.m; ++k)
        if (model_.group_active[h] & (IndicatorMask{1} << k)) p_on *= 1.0 - model_.q_level[k];
      const double p_off = 1.0 - model_.q_group[h];
      if (uniform01(rng_) < p_on / (p_on + p_off)) {
        xi_ |= bit;
      } else {
        xi_ &= ~bit;
      }
    }
  }

  static void retune(double& step, long& acc, long& att) {
    if (att == 0) return;
    const double rate = static_cast<double>(acc) / static_cast<double>(att);
    if (rate < 0.2) step *= 0.7;
    if (rate > 0.5) step *= 1.4;
    step = std::clamp(step, 0.01, 2.0);
    acc = att = 0;
  }

  void adapt() {
    retune(step0_, acc0_, att0_);
    retune(step1_, acc1_, att1_);
    for (std::size_t k = 0; k < model_.m; ++k) retune(step_gamma_[k], acc_gamma_[k], att_gamma_[k]);
  }

  const Cells& cells_;
  const Model& model_;
  const SamplerConfig& config_;
  Engine rng_;

  double a0_ = 0.0, a1_ = 0.0, log_p_ = 0.0, plateau_ = 1.0, exp_a1_ = 1.0;
  double total_events_ = 0.0, cell_sum_ = 0.0;
  std::vector<double> gamma_;
  IndicatorMask eta_ = 0;
  std::uint32_t xi_ = 0;

  std::vector<double> dose_, explin_, g_, logg_, ll_;
  std::vector<double> g_new_, logg_new_, ll_new_;

  double step0_ = 0.5, step1_ = 0.5;
  long acc0_ = 0, att0_ = 0, acc1_ = 0, att1_ = 0;
  std::vector<double> step_gamma_;
  std::vector<long> acc_gamma_, att_gamma_;
};

}  // namespace

double eff_weight(const EffObservation& obs) {
  if (!(obs.window > 0.0)) throw InputError("efficacy window must be positive", {"window"});
  if (obs.follow_time < 0.0) throw InputError("follow-up time must be non-negative", {"follow_time"});
  if (obs.responded) return 1.0;
  return std::min(obs.follow_time / obs.window, 1.0);
}

double eff_prob(double alpha0, double alpha1, double linear, double scaled_dose) {
  const double log_plateau = -std::exp(alpha0);
  const double x = std::exp(alpha1 + linear + std::log(scaled_dose));
  return std::exp(log_plateau) * -std::expm1(-x);
}

double EffPosterior::linear(std::size_t i, IndicatorMask z) const {
  double s = 0.0;
  const double* g = gamma_.data() + i * m_;
  for (IndicatorMask bits = z; bits; bits &= bits - 1) s += g[std::countr_zero(bits)];
  return s;
}

double EffPosterior::prob(std::size_t i, IndicatorMask z, double scaled_dose) const {
  return eff_prob(alpha0_[i], alpha1_[i], linear(i, z), scaled_dose);
}

void EffPosterior::add_draw(double alpha0, double alpha1, std::span<const double> gamma, IndicatorMask eta,
                            std::uint32_t xi) {
  if (gamma.size() != m_) throw InputError("gamma draw has the wrong length");
  alpha0_.push_back(alpha0);
  alpha1_.push_back(alpha1);
  gamma_.insert(gamma_.end(), gamma.begin(), gamma.end());
  eta_.push_back(eta);
  xi_.push_back(xi);
}

void EffPosterior::finish() {
  inclusion_.assign(m_, 0.0);
  if (eta_.empty()) return;
  for (IndicatorMask e : eta_)
    for (IndicatorMask bits = e; bits; bits &= bits - 1) inclusion_[static_cast<std::size_t>(std::countr_zero(bits))] += 1.0;
  for (double& v : inclusion_) v /= static_cast<double>(eta_.size());
}

EffPosterior fit_eff_posterior(std::span<const EffObservation> data, const CovariateSchema& schema,
                               std::span<const double> scaled_doses, IndicatorMask active,
                               const SamplerConfig& config, std::uint64_t stream_key) {
  if (config.chains < 1 || config.iterations <= config.burn_in || config.burn_in < 0)
    throw InputError("invalid efficacy sampler configuration", {"mcmc"});
  if (!(config.alpha_prior_var > 0.0)) throw InputError("alpha prior variance must be positive", {"mcmc"});
  for (std::size_t j = 0; j < scaled_doses.size(); ++j)
    if (!(scaled_doses[j] > 0.0 && scaled_doses[j] < 1.0))
      throw InputError("scaled doses must lie in (0,1)", {"scaled_doses/" + std::to_string(j)});

  Model model;
  model.m = schema.num_indicators();
  model.h = schema.num_characteristics();
  model.active = active & schema.all_indicators();
  model.alpha_prior_var = config.alpha_prior_var;
  for (const auto& ind : schema.indicators()) {
    model.group.push_back(ind.characteristic);
    model.slab.push_back({ind.slab, ind.slab_sd});
    model.q_level.push_back(ind.q_level);
  }
  for (std::size_t h = 0; h < model.h; ++h) {
    model.q_group.push_back(schema.characteristics()[h].q_group);
    model.group_active.push_back(schema.group_mask(h) & model.active);
  }

  const Cells cells = build_cells(data, scaled_doses, model.active, model.m);

  std::vector<EffPosterior> parts(static_cast<std::size_t>(config.chains), EffPosterior(model.m, model.h));
  std::vector<double> acc0(parts.size()), acc1(parts.size()), toggles(parts.size());
  auto run_chain = [&](std::size_t c) {
    Chain chain(cells, model, config, make_engine(splitmix64(stream_key + 0x51ed27 * (c + 1))));
    chain.run(parts[c]);
    acc0[c] = chain.acceptance0;
    acc1[c] = chain.acceptance1;
    toggles[c] = chain.toggle_rate;
  };
  if (config.parallel_chains && parts.size() > 1) {
    std::vector<std::future<void>> jobs;
    for (std::size_t c = 0; c < parts.size(); ++c) jobs.push_back(std::async(std::launch::async, run_chain, c));
    for (auto& j : jobs) j.get();
  } else {
    for (std::size_t c = 0; c < parts.size(); ++c) run_chain(c);
  }

  EffPosterior out(model.m, model.h);
  for (const auto& part : parts) {
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::vector<double> g(model.m);
      for (std::size_t k = 0; k < model.m; ++k) g[k] = part.gamma(i, k);
      out.add_draw(part.alpha0(i), part.alpha1(i), g, part.eta(i), part.xi(i));
    }
  }
  out.finish();
  out.n_chains = config.chains;
  out.burn_in = config.burn_in;
  out.active = model.active;
  for (std::size_t c = 0; c < parts.size(); ++c) {
    out.acceptance_alpha0 += acc0[c] / parts.size();
    out.acceptance_alpha1 += acc1[c] / parts.size();
    out.toggle_rate += toggles[c] / parts.size();
  }
  return out;
}

IndicatorMask select_covariates(const EffPosterior& post, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InputError("selection threshold must lie in (0,1)");
  IndicatorMask out = 0;
  const auto& inc = post.inclusion_probs();
  for (std::size_t k = 0; k < inc.size(); ++k)
    if (inc[k] > threshold) out |= IndicatorMask{1} << k;
  return out;
}

ConditionalDraws conditional_draws(const EffPosterior& post, IndicatorMask condition, std::size_t min_draws) {
  ConditionalDraws out;
  for (std::size_t i = 0; i < post.size(); ++i)
    if ((post.eta(i) & condition) == condition) out.index.push_back(i);
  if (out.index.empty()) throw ConditioningError("no posterior draw includes every conditioning covariate");
  if (out.index.size() < min_draws) {
    out.fell_back = true;
    out.index.resize(post.size());
    for (std::size_t i = 0; i < post.size(); ++i) out.index[i] = i;
  }
  return out;
}

ConditionalProbs eff_draws_conditional(const EffPosterior& post, IndicatorMask z, double scaled_dose,
                                       IndicatorMask condition) {
  const auto draws = conditional_draws(post, condition);
  ConditionalProbs out;
  out.fell_back = draws.fell_back;
  out.probs.reserve(draws.index.size());
  for (std::size_t i : draws.index) out.probs.push_back(post.prob(i, z, scaled_dose));
  return out;
}

}  // namespace doseopt::bsgs
