#include "doseopt/design_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "doseopt/error.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace doseopt::design {

namespace {

constexpr const char* kStageNames[] = {
    "escalation",    "pk_adjust",   "futility_1", "adaptive_randomization", "futility_2",
    "optimization",  "final_analysis", "terminated_futile", "complete",
};

bool in_unit(double x) { return x > 0.0 && x < 1.0; }

bool contains(std::span<const int> v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

std::vector<int> excluded_levels(std::span<const Exclusion> exclusions, std::size_t h) {
  std::vector<int> out;
  for (const auto& e : exclusions)
    if (e.characteristic == h)
      for (int l : e.levels)
        if (!contains(out, l)) out.push_back(l);
  std::sort(out.begin(), out.end());
  return out;
}

// Draw indices conditional on `condition`; falls back to every draw when no
// draw qualifies.
bsgs::ConditionalDraws draws_for(const bsgs::EffPosterior& post, bsgs::IndicatorMask condition, int min_draws,
                                 bool& fell_back) {
  try {
    auto d = bsgs::conditional_draws(post, condition, static_cast<std::size_t>(min_draws));
    fell_back = d.fell_back;
    return d;
  } catch (const ConditioningError&) {
    bsgs::ConditionalDraws all;
    all.index.resize(post.size());
    std::iota(all.index.begin(), all.index.end(), std::size_t{0});
    all.fell_back = true;
    fell_back = true;
    return all;
  }
}

}  // namespace

const char* to_string(Stage stage) { return kStageNames[static_cast<int>(stage)]; }

Stage stage_from_string(const std::string& name) {
  for (int i = 0; i < 9; ++i)
    if (name == kStageNames[i]) return static_cast<Stage>(i);
  throw InputError("unknown stage '" + name + "'", {"stage"});
}

int DesignConfig::n_randomization() const { return static_cast<int>(std::lround(r * n2)); }

double DesignConfig::alpha(int n) const {
  return alpha_base * (1.0 - alpha_decay * static_cast<double>(n) / static_cast<double>(n2));
}

void DesignConfig::validate() const {
  std::vector<std::string> bad;
  if (n1 <= 0) bad.push_back("n1");
  if (n2 <= 0) bad.push_back("n2");
  if (!in_unit(r)) bad.push_back("r");
  const std::pair<const char*, double> probs[] = {
      {"p_target", p_target}, {"psi_e", psi_e},   {"psi_f", psi_f},     {"psi_obd", psi_obd},
      {"c_f", c_f},           {"lambda", lambda}, {"delta", delta},     {"kappa", kappa},
      {"epsilon", epsilon},
  };
  for (const auto& [name, v] : probs)
    if (!in_unit(v)) bad.push_back(name);
  if (s_min < 0) bad.push_back("s_min");
  if (!(alpha_base > 0.0)) bad.push_back("alpha_base");
  if (!(alpha_decay >= 0.0 && alpha_decay < 1.0)) bad.push_back("alpha_decay");
  if (futility_min_1 < 0) bad.push_back("futility_min_1");
  if (futility_min_2 < 0) bad.push_back("futility_min_2");
  if (cohort_size < 1) bad.push_back("cohort_size");
  if (!(tox_window > 0.0)) bad.push_back("tox_window");
  if (!(eff_window > 0.0)) bad.push_back("eff_window");
  if (!(tox_prior_sd > 0.0)) bad.push_back("tox_prior_sd");
  if (!(pk_threshold > 0.0)) bad.push_back("pk_threshold");
  if (!(pk_mean_clearance > 0.0)) bad.push_back("pk_mean_clearance");
  if (min_conditional_draws < 1) bad.push_back("min_conditional_draws");
  if (mcmc.chains < 1 || mcmc.iterations <= mcmc.burn_in || mcmc.burn_in < 0) bad.push_back("mcmc");
  if (pk_mcmc.draws < 1 || pk_mcmc.burn_in < 0 || !(pk_mcmc.sigma_step > 0.0)) bad.push_back("pk_mcmc");
  if (!bad.empty()) {
    std::string msg = "invalid design configuration:";
    for (const auto& b : bad) msg += " " + b;
    throw InputError(msg, bad);
  }
}

bool is_excluded(std::span<const Exclusion> exclusions, std::span<const int> levels) {
  return excluding_assessment(exclusions, levels).has_value();
}

std::optional<int> excluding_assessment(std::span<const Exclusion> exclusions, std::span<const int> levels) {
  for (const auto& e : exclusions)
    if (e.characteristic < levels.size() && contains(e.levels, levels[e.characteristic])) return e.assessment;
  return std::nullopt;
}

std::vector<Level> admissible_set(std::span<const Level> acceptable, std::span<const double> estimates,
                                  std::span<const int> treated, double kappa, int s_min) {
  std::vector<Level> out;
  for (Level j : acceptable) {
    const auto u = static_cast<std::size_t>(j);
    if (u >= estimates.size() || u >= treated.size()) throw InputError("level outside the estimate table");
    if (estimates[u] >= kappa || treated[u] < s_min) out.push_back(j);
  }
  return out;
}

std::vector<double> randomization_probs(std::span<const double> weights) {
  if (weights.empty()) throw InputError("nothing to randomize over");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("randomization weights must be finite and non-negative");
    total += w;
  }
  std::vector<double> p(weights.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i] = total > 0.0 ? weights[i] / total : 1.0 / static_cast<double>(p.size());
  return p;
}

Level randomize_dose(std::span<const Level> levels, std::span<const double> weights, Engine& rng) {
  if (levels.size() != weights.size()) throw InputError("levels and weights differ in length");
  const auto p = randomization_probs(weights);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return levels[i];
  }
  // u landed in the rounding gap above the last cumulative sum
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return levels[i];
  return levels.back();
}

Level optimization_dose(std::span<const Level> levels, std::span<const double> estimates, double alpha) {
  if (levels.empty() || levels.size() != estimates.size()) throw InputError("optimization needs aligned, non-empty inputs");
  const double best = *std::max_element(estimates.begin(), estimates.end());
  Level pick = levels.back();
  bool found = false;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (std::abs(estimates[i] - best) < alpha && (!found || levels[i] < pick)) {
      pick = levels[i];
      found = true;
    }
  }
  if (!found) {
    // alpha <= 0: only the maximum qualifies
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (estimates[i] == best) return levels[i];
  }
  return pick;
}

std::vector<Level> apply_pk_adjustment(Level mtd_tox, std::optional<Level> mtd_pk, std::size_t num_levels) {
  const Level mtd = mtd_pk ? pk::adjust_mtd(mtd_tox, *mtd_pk) : mtd_tox;
  return crm::acceptable_set(mtd, num_levels);
}

ObdReport final_analysis(const bsgs::EffPosterior& post, const bsgs::CovariateSchema& schema,
                         std::span<const Exclusion> exclusions, std::span<const Level> acceptable,
                         std::span<const double> scaled, const DesignConfig& config) {
  if (acceptable.empty()) throw InputError("final analysis needs a non-empty acceptable set");
  ObdReport rep;
  rep.acceptable.assign(acceptable.begin(), acceptable.end());
  rep.inclusion = post.inclusion_probs();
  rep.active = post.active;
  rep.selected = config.heterogeneity_enabled ? bsgs::select_covariates(post, config.psi_e) & post.active : 0;

  // Patterns over the selected indicators: at most one set per characteristic.
  std::vector<bsgs::IndicatorMask> patterns{0};
  for (std::size_t h = 0; h < schema.num_characteristics(); ++h) {
    const bsgs::IndicatorMask sel = schema.group_mask(h) & rep.selected;
    if (!sel) continue;
    std::vector<bsgs::IndicatorMask> next;
    for (auto z : patterns) {
      next.push_back(z);
      for (std::size_t k = 0; k < schema.num_indicators(); ++k)
        if (sel >> k & 1u) next.push_back(z | (1u << k));
    }
    patterns = std::move(next);
  }

  const auto& inds = schema.indicators();
  const std::size_t nj = scaled.size();
  const Level top = acceptable.back();
  for (auto z : patterns) {
    ObdEntry e;
    e.z = z;
    // A pattern is out of the target population when, for some characteristic,
    // every level it stands for has been eliminated.
    std::string label;
    for (std::size_t h = 0; h < schema.num_characteristics(); ++h) {
      const auto& ch = schema.characteristics()[h];
      const bsgs::IndicatorMask sel = schema.group_mask(h) & rep.selected;
      std::vector<int> covered;
      if (z & sel) {
        for (std::size_t k = 0; k < inds.size(); ++k)
          if (z >> k & 1u) {
            if (inds[k].characteristic == h) covered.push_back(static_cast<int>(inds[k].level));
          }
        if (!label.empty()) label += ", ";
        label += ch.name + "=" + ch.levels[static_cast<std::size_t>(covered.front())];
      } else {
        for (std::size_t l = 0; l < ch.levels.size(); ++l) {
          const int idx = schema.indicator_index(ch.name, ch.levels[l]);
          if (idx >= 0 && (sel >> idx & 1u)) continue;
          covered.push_back(static_cast<int>(l));
        }
        if (sel) {
          if (!label.empty()) label += ", ";
          label += ch.name + "=other";
        }
      }
      const auto ex = excluded_levels(exclusions, h);
      if (!ex.empty() && std::all_of(covered.begin(), covered.end(), [&](int l) { return contains(ex, l); }))
        e.excluded = true;
    }
    e.label = label.empty() ? "all" : label;
    if (e.excluded) {
      rep.entries.push_back(std::move(e));
      continue;
    }

    bool fell_back = false;
    const auto draws = draws_for(post, rep.selected, config.min_conditional_draws, fell_back);
    e.conditioning_fallback = fell_back;
    e.mean_eff.assign(nj, 0.0);
    e.prob_near_max.assign(nj, 0.0);
    std::vector<double> pi(nj);
    double exceed = 0.0;
    for (std::size_t i : draws.index) {
      double best = 0.0;
      for (Level j : acceptable) {
        const auto u = static_cast<std::size_t>(j);
        pi[u] = post.prob(i, z, scaled[u]);
        best = std::max(best, pi[u]);
        e.mean_eff[u] += pi[u];
      }
      for (Level j : acceptable) {
        const auto u = static_cast<std::size_t>(j);
        if (pi[u] >= config.epsilon * best) e.prob_near_max[u] += 1.0;
      }
      if (pi[static_cast<std::size_t>(top)] >= config.c_f) exceed += 1.0;
    }
    const double n = static_cast<double>(draws.index.size());
    for (Level j : acceptable) {
      e.mean_eff[static_cast<std::size_t>(j)] /= n;
      e.prob_near_max[static_cast<std::size_t>(j)] /= n;
    }
    e.prob_exceed_cf = exceed / n;
    e.futile = config.heterogeneity_enabled && e.prob_exceed_cf < config.delta;
    if (!e.futile) {
      for (Level j : acceptable)
        if (e.prob_near_max[static_cast<std::size_t>(j)] > config.psi_obd) {
          e.obd = j;
          break;
        }
      if (!e.obd) e.obd = top;
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

const ObdEntry* obd_entry(const ObdReport& report, const bsgs::CovariateSchema& schema,
                          std::span<const int> levels) {
  const auto z = schema.encode(levels) & report.selected;
  for (const auto& e : report.entries)
    if (e.z == z) return &e;
  return nullptr;
}

std::optional<Level> recommended_obd(const TrialState& state, const bsgs::CovariateSchema& schema,
                                     std::span<const int> levels) {
  if (!state.obd || is_excluded(state.exclusions, levels)) return std::nullopt;
  const auto* e = obd_entry(*state.obd, schema, levels);
  if (!e || e->excluded) return std::nullopt;
  return e->obd;
}

// ---------------------------------------------------------------------------

Trial::Trial(DesignConfig config, DoseGrid grid, bsgs::CovariateSchema schema, std::uint64_t seed,
             std::uint64_t replicate)
    : config_(std::move(config)), grid_(std::move(grid)), schema_(std::move(schema)) {
  config_.validate();
  state_.seed = seed;
  state_.replicate = replicate;
  state_.acceptable = crm::acceptable_set(static_cast<Level>(grid_.size()) - 1, grid_.size());
}

Trial::Trial(DesignConfig config, DoseGrid grid, bsgs::CovariateSchema schema, TrialState state)
    : config_(std::move(config)), grid_(std::move(grid)), schema_(std::move(schema)), state_(std::move(state)) {
  config_.validate();
  for (const auto& p : state_.patients) {
    schema_.validate_levels(p.levels);
    if (p.dose < 0 || static_cast<std::size_t>(p.dose) >= grid_.size())
      throw InputError("stored patient has an out-of-range dose", {"patients"});
  }
}

std::optional<double> Trial::ready_time() const {
  if (state_.stage != Stage::PkAdjust && state_.stage != Stage::FinalAnalysis) return std::nullopt;
  double last = 0.0;
  for (const auto& p : state_.patients) last = std::max(last, p.arrival);
  const double wait =
      state_.stage == Stage::PkAdjust ? config_.tox_window : std::max(config_.tox_window, config_.eff_window);
  return last + wait;
}

bool Trial::accepting(double now) const {
  switch (state_.stage) {
    case Stage::Escalation:
    case Stage::AdaptiveRandomization:
    case Stage::Optimization:
      return true;
    case Stage::PkAdjust:
      return now >= *ready_time();
    default:
      return false;
  }
}

bool Trial::excluded(std::span<const int> levels) const { return is_excluded(state_.exclusions, levels); }

PatientRecord& Trial::patient(int id) {
  if (id < 1 || static_cast<std::size_t>(id) > state_.patients.size())
    throw NotFoundError("unknown patient " + std::to_string(id));
  return state_.patients[static_cast<std::size_t>(id - 1)];
}

void Trial::advance(double now) {
  if (!std::isfinite(now)) throw InputError("time must be finite", {"time"});
  if (now < state_.now) throw InputError("the trial clock cannot move backwards", {"time"});
  for (auto ready = ready_time(); ready && *ready <= now; ready = ready_time()) {
    state_.now = std::max(state_.now, *ready);
    if (state_.stage == Stage::PkAdjust)
      run_pk_adjustment();
    else
      run_final_analysis();
  }
  state_.now = now;
}

std::vector<crm::ToxObservation> Trial::tox_data(bool full_observation) const {
  std::vector<crm::ToxObservation> out;
  out.reserve(state_.patients.size());
  for (const auto& p : state_.patients) {
    const double follow = state_.now - p.arrival;
    crm::ToxObservation o;
    o.level = p.dose;
    o.window = config_.tox_window;
    o.toxic = p.toxic.value_or(false) && p.tox_time <= follow;
    o.follow_time = full_observation ? config_.tox_window : std::min(std::max(follow, 0.0), config_.tox_window);
    out.push_back(o);
  }
  return out;
}

std::vector<bsgs::EffObservation> Trial::eff_data(bool full_observation) const {
  std::vector<bsgs::EffObservation> out;
  out.reserve(state_.patients.size());
  for (const auto& p : state_.patients) {
    if (excluded(p.levels)) continue;
    const double follow = state_.now - p.arrival;
    bsgs::EffObservation o;
    o.level = p.dose;
    o.z = p.z;
    o.window = config_.eff_window;
    o.responded = p.responded.value_or(false) && p.eff_time <= follow;
    o.follow_time = full_observation ? config_.eff_window : std::min(std::max(follow, 0.0), config_.eff_window);
    out.push_back(o);
  }
  return out;
}

std::vector<int> Trial::treated_counts() const {
  std::vector<int> n(grid_.size(), 0);
  for (const auto& p : state_.patients) ++n[static_cast<std::size_t>(p.dose)];
  return n;
}

bsgs::IndicatorMask Trial::active_indicators() const {
  if (!config_.heterogeneity_enabled) return 0;
  bsgs::IndicatorMask active = 0;
  for (std::size_t h = 0; h < schema_.num_characteristics(); ++h) {
    const auto& ch = schema_.characteristics()[h];
    std::vector<int> present;
    for (const auto& p : state_.patients) {
      if (excluded(p.levels)) continue;
      if (!contains(present, p.levels[h])) present.push_back(p.levels[h]);
    }
    if (present.size() < 2) continue;
    std::sort(present.begin(), present.end());
    const bool ref_present = contains(present, static_cast<int>(ch.reference));
    bool skipped = false;
    for (int l : present) {
      const int k = schema_.indicator_index(ch.name, ch.levels[static_cast<std::size_t>(l)]);
      if (k < 0) continue;
      if (!ref_present && !skipped) {
        // lowest remaining level stands in for the eliminated reference
        skipped = true;
        continue;
      }
      active |= 1u << k;
    }
  }
  return active;
}

std::vector<double> Trial::scaled_doses() const {
  if (state_.pk) return state_.pk->scaled;
  auto sk = grid_.skeleton();
  return {sk.begin(), sk.end()};
}

bsgs::EffPosterior Trial::fit_efficacy(Stream purpose, std::uint64_t index, bool full_observation,
                                       std::span<const double> scaled) const {
  const auto data = eff_data(full_observation);
  return bsgs::fit_eff_posterior(data, schema_, scaled, active_indicators(), config_.mcmc,
                                 stream_key(state_.seed, state_.replicate, purpose, index));
}

Assignment Trial::enroll(std::span<const int> levels, double now) {
  advance(now);
  schema_.validate_levels(levels);
  if (finished()) throw StateError(std::string("trial is closed (") + to_string(state_.stage) + ")");
  if (!accepting(now)) {
    std::string msg = std::string("enrollment is paused in stage ") + to_string(state_.stage);
    if (auto r = ready_time()) msg += " until week " + std::to_string(*r);
    throw StateError(msg);
  }
  if (auto a = excluding_assessment(state_.exclusions, levels))
    throw ExcludedSubgroupError("patient belongs to a subgroup eliminated at futility assessment " +
                                    std::to_string(*a),
                                *a);

  PatientRecord rec;
  rec.id = static_cast<int>(state_.patients.size()) + 1;
  rec.arrival = state_.now;
  rec.levels.assign(levels.begin(), levels.end());
  rec.z = schema_.encode(levels);
  rec.stage = state_.stage;

  Assignment a = state_.stage == Stage::Escalation ? assign_escalation(rec) : assign_dose_ranging(rec);
  rec.dose = a.dose;
  state_.patients.push_back(std::move(rec));

  const int total = static_cast<int>(state_.patients.size());
  if (state_.stage == Stage::Escalation && total == config_.n1) {
    state_.stage = Stage::PkAdjust;
  } else if (state_.stage == Stage::AdaptiveRandomization && total == config_.n1 + config_.n_randomization()) {
    run_futility(2, Stage::Optimization);
  } else if (state_.stage == Stage::Optimization && total >= config_.n_max()) {
    state_.stage = Stage::FinalAnalysis;
  }
  return a;
}

Assignment Trial::assign_escalation(PatientRecord& rec) {
  DoseDecision d;
  d.patient = rec.id;
  d.stage = Stage::Escalation;
  d.time = state_.now;
  const int m = static_cast<int>(state_.patients.size());
  if (m == 0) {
    d.dose = 0;
    auto sk = grid_.skeleton();
    d.tox_probs.assign(sk.begin(), sk.end());
  } else if (m % config_.cohort_size != 0) {
    d.dose = state_.patients.back().dose;
  } else {
    const auto data = tox_data(config_.escalation_full_observation);
    const auto post = crm::fit_tox_posterior(data, grid_.skeleton(), config_.tox_prior_sd);
    Level highest = 0;
    for (const auto& p : state_.patients) highest = std::max(highest, p.dose);
    d.dose = crm::next_dose(post.probs, config_.p_target, highest);
    d.tox_probs = post.probs;
  }
  d.admissible = state_.acceptable;
  state_.decisions.push_back(d);
  return {rec.id, d.dose, Stage::Escalation};
}

Assignment Trial::assign_dose_ranging(PatientRecord& rec) {
  const auto scaled = scaled_doses();
  const auto post = fit_efficacy(Stream::McmcEnroll, static_cast<std::uint64_t>(rec.id), false, scaled);
  DoseDecision d;
  d.patient = rec.id;
  d.stage = state_.stage;
  d.time = state_.now;
  d.inclusion = post.inclusion_probs();
  d.selected = bsgs::select_covariates(post, config_.psi_e) & post.active;

  bool fell_back = false;
  const auto draws = draws_for(post, d.selected, config_.min_conditional_draws, fell_back);
  d.conditioning_fallback = fell_back;
  const auto z = rec.z & d.selected;
  std::vector<double> est(grid_.size(), 0.0);
  for (Level j : state_.acceptable) {
    const auto u = static_cast<std::size_t>(j);
    double s = 0.0;
    for (std::size_t i : draws.index) s += post.prob(i, z, scaled[u]);
    est[u] = s / static_cast<double>(draws.index.size());
    d.eff_estimates.push_back(est[u]);
  }
  const auto treated = treated_counts();
  d.admissible = admissible_set(state_.acceptable, est, treated, config_.kappa, config_.s_min);
  if (d.admissible.empty()) {
    d.empty_admissible = true;
    ++state_.empty_admissible_events;
    d.dose = state_.acceptable.front();
  } else {
    std::vector<double> w;
    for (Level j : d.admissible) w.push_back(est[static_cast<std::size_t>(j)]);
    if (state_.stage == Stage::AdaptiveRandomization) {
      auto rng = make_engine(state_.seed, state_.replicate, Stream::Randomization, static_cast<std::uint64_t>(rec.id));
      d.dose = randomize_dose(d.admissible, w, rng);
    } else {
      const int n = static_cast<int>(state_.patients.size()) - config_.n1;
      d.dose = optimization_dose(d.admissible, w, config_.alpha(n));
    }
  }
  state_.decisions.push_back(d);
  return {rec.id, d.dose, state_.stage};
}

void Trial::run_pk_adjustment() {
  PkAdjustment adj;
  adj.time = state_.now;
  const auto tox = tox_data(true);
  const auto post = crm::fit_tox_posterior(tox, grid_.skeleton(), config_.tox_prior_sd);
  adj.tox_mean_a = post.mean_a;
  adj.scaled = post.probs;
  adj.mtd_tox = crm::closest_to_target(post.probs, config_.p_target);
  adj.acceptable_tox = crm::acceptable_set(adj.mtd_tox, grid_.size());
  if (config_.pk_enabled) {
    std::vector<pk::PkObservation> pkd;
    for (const auto& p : state_.patients) {
      if (p.stage != Stage::Escalation) continue;
      if (!p.auc) throw InputError("AUC missing for escalation patient " + std::to_string(p.id), {"auc"});
      pkd.push_back({p.dose, *p.auc});
    }
    auto rng = make_engine(state_.seed, state_.replicate, Stream::PkSampler, 0);
    const auto pkpost = pk::fit_pk_posterior(pkd, grid_, pk::PkPrior::with_clearance(config_.pk_mean_clearance),
                                             config_.pk_mcmc, rng);
    adj.pk_exceed = pk::pk_exceed_probs(pkpost, grid_, config_.pk_threshold);
    adj.mtd_pk = pk::mtd_pk(pkpost, grid_, config_.pk_threshold, config_.p_target);
  }
  state_.acceptable = apply_pk_adjustment(adj.mtd_tox, adj.mtd_pk, grid_.size());
  adj.mtd_star = state_.acceptable.back();
  state_.pk = std::move(adj);
  state_.stage = Stage::Futility1;
  run_futility(1, Stage::AdaptiveRandomization);
}

FutilityOutcome Trial::futility_assessment(int assessment) {
  FutilityOutcome out;
  out.assessment = assessment;
  out.time = state_.now;
  if (!config_.heterogeneity_enabled) return out;
  const auto scaled = scaled_doses();
  const auto post = fit_efficacy(Stream::McmcFutility, static_cast<std::uint64_t>(assessment), false, scaled);
  out.inclusion = post.inclusion_probs();

  int best = -1;
  for (std::size_t k = 0; k < out.inclusion.size(); ++k) {
    if (!(post.active >> k & 1u) || !(out.inclusion[k] > config_.psi_f)) continue;
    if (best < 0 || out.inclusion[k] > out.inclusion[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  if (best < 0) return out;
  out.influential = best;

  const auto& ind = schema_.indicators()[static_cast<std::size_t>(best)];
  const bsgs::IndicatorMask bit = 1u << best;
  const Level mtd_star = state_.acceptable.back();
  const double p_star = scaled[static_cast<std::size_t>(mtd_star)];
  bool fell_back = false;
  const auto draws = draws_for(post, bit, config_.min_conditional_draws, fell_back);
  out.conditioning_fallback = fell_back;

  int eliminated = 0;
  for (int v : {1, 0}) {
    SubgroupTest t;
    t.value = v;
    double exceed = 0.0;
    for (std::size_t i : draws.index)
      if (post.prob(i, v ? bit : 0u, p_star) > config_.c_f) exceed += 1.0;
    t.prob_exceed = exceed / static_cast<double>(draws.index.size());
    t.criterion_met = t.prob_exceed < config_.lambda;
    for (const auto& p : state_.patients) {
      if (excluded(p.levels)) continue;
      const bool member = (p.levels[ind.characteristic] == static_cast<int>(ind.level)) == (v == 1);
      if (!member) continue;
      const bool counted = assessment == 1 ? p.dose == mtd_star
                                           : contains(state_.acceptable, p.dose);
      if (counted) ++t.n_treated;
    }
    const int need = assessment == 1 ? config_.futility_min_1 : config_.futility_min_2;
    t.eliminated = t.criterion_met && t.n_treated >= need;
    if (t.eliminated) ++eliminated;
    out.subgroups.push_back(t);
  }
  out.trial_stop = eliminated == 2;
  return out;
}

void Trial::run_futility(int assessment, Stage next) {
  state_.stage = assessment == 1 ? Stage::Futility1 : Stage::Futility2;
  auto out = futility_assessment(assessment);
  if (out.influential) {
    const auto& ind = schema_.indicators()[static_cast<std::size_t>(*out.influential)];
    const auto h = ind.characteristic;
    const auto& ch = schema_.characteristics()[h];
    const auto already = excluded_levels(state_.exclusions, h);
    for (const auto& t : out.subgroups) {
      if (!t.eliminated) continue;
      Exclusion e;
      e.characteristic = h;
      e.assessment = assessment;
      for (std::size_t l = 0; l < ch.levels.size(); ++l) {
        const bool member = (l == ind.level) == (t.value == 1);
        if (member && !contains(already, static_cast<int>(l))) e.levels.push_back(static_cast<int>(l));
      }
      if (!e.levels.empty()) state_.exclusions.push_back(std::move(e));
    }
  }
  const bool stop = out.trial_stop;
  state_.futility.push_back(std::move(out));
  if (stop) {
    state_.stage = Stage::TerminatedFutile;
    state_.stop_reason = "every subgroup of the influential covariate was futile at assessment " +
                         std::to_string(assessment);
    return;
  }
  state_.stage = next;
  const int total = static_cast<int>(state_.patients.size());
  if (next == Stage::AdaptiveRandomization && config_.n_randomization() == 0)
    run_futility(2, Stage::Optimization);
  else if (next == Stage::Optimization && total >= config_.n_max())
    state_.stage = Stage::FinalAnalysis;
}

void Trial::run_final_analysis() {
  const auto tox = tox_data(true);
  const auto skel = scaled_doses();
  const auto tpost = crm::fit_tox_posterior(tox, skel, config_.tox_prior_sd);
  const Level mtd = crm::closest_to_target(tpost.probs, config_.p_target);
  const auto acceptable = crm::acceptable_set(mtd, grid_.size());
  const auto post = fit_efficacy(Stream::McmcFinal, 0, true, tpost.probs);
  auto rep = final_analysis(post, schema_, state_.exclusions, acceptable, tpost.probs, config_);
  rep.time = state_.now;
  rep.tox_probs = tpost.probs;
  rep.mtd = mtd;
  state_.obd = std::move(rep);
  state_.stage = Stage::Complete;
}

void Trial::record_toxicity(int id, bool toxic, double event_time) {
  auto& p = patient(id);
  if (p.toxic) throw StateError("toxicity outcome already recorded for patient " + std::to_string(id));
  if (toxic && !(event_time >= 0.0 && event_time <= config_.tox_window))
    throw InputError("toxicity onset must fall inside the observation window", {"event_time"});
  p.toxic = toxic;
  p.tox_time = toxic ? event_time : config_.tox_window;
}

void Trial::record_efficacy(int id, bool responded, double event_time) {
  auto& p = patient(id);
  if (p.responded) throw StateError("efficacy outcome already recorded for patient " + std::to_string(id));
  if (responded && !(event_time >= 0.0 && event_time <= config_.eff_window))
    throw InputError("response time must fall inside the observation window", {"event_time"});
  p.responded = responded;
  p.eff_time = responded ? event_time : config_.eff_window;
}

void Trial::record_auc(int id, double auc) {
  auto& p = patient(id);
  if (p.auc) throw StateError("AUC already recorded for patient " + std::to_string(id));
  if (!(auc > 0.0) || !std::isfinite(auc)) throw InputError("AUC must be positive", {"auc"});
  p.auc = auc;
}

void Trial::impose_exclusion(Exclusion exclusion) {
  if (exclusion.characteristic >= schema_.num_characteristics())
    throw InputError("exclusion names an unknown characteristic", {"characteristic"});
  const auto& ch = schema_.characteristics()[exclusion.characteristic];
  for (int l : exclusion.levels)
    if (l < 0 || static_cast<std::size_t>(l) >= ch.levels.size())
      throw InputError("exclusion names an unknown level", {"levels"});
  state_.exclusions.push_back(std::move(exclusion));
}

// ---------------------------------------------------------------------------

namespace {

void enroll_candidate(Trial& trial, PatientSource& source, const Candidate& c, double t) {
  const auto a = trial.enroll(c.levels, t);
  const auto o = source.outcomes(c, a.dose);
  trial.record_toxicity(a.patient, o.toxic, o.toxic ? o.tox_time : trial.config().tox_window);
  trial.record_efficacy(a.patient, o.responded, o.responded ? o.eff_time : trial.config().eff_window);
  trial.record_auc(a.patient, o.auc);
}

}  // namespace

void run_escalation(Trial& trial, PatientSource& source) {
  if (trial.stage() != Stage::Escalation) throw StateError("run_escalation needs a trial in escalation");
  while (trial.stage() == Stage::Escalation) {
    auto c = source.next();
    if (!c) throw StateError("patient source exhausted during escalation");
    enroll_candidate(trial, source, *c, std::max(c->arrival, trial.state().now));
  }
}

void run_to_completion(Trial& trial, PatientSource& source) {
  while (!trial.finished()) {
    if (trial.stage() == Stage::FinalAnalysis) {
      trial.advance(std::max(trial.state().now, *trial.ready_time()));
      continue;
    }
    auto c = source.next();
    if (!c) throw StateError("patient source exhausted before the trial finished");
    double t = std::max(c->arrival, trial.state().now);
    if (trial.stage() == Stage::PkAdjust) t = std::max(t, *trial.ready_time());
    trial.advance(t);
    if (trial.finished()) break;
    if (trial.excluded(c->levels)) continue;
    enroll_candidate(trial, source, *c, t);
  }
}

}  // namespace doseopt::design
