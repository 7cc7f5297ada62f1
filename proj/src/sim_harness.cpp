#include "doseopt/sim_harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "doseopt/error.hpp"
#include "doseopt/serialization.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace doseopt::sim {

namespace fs = std::filesystem;
using io::Json;

namespace {

double probit(double p) { return boost::math::quantile(boost::math::normal(), p); }
double phi(double x) { return boost::math::cdf(boost::math::normal(), x); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path, {path});
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string(), {path.string()});
  out << text;
}

bool matches(const bsgs::CovariateSchema& schema, const std::map<std::string, std::string>& when,
             std::span<const int> levels) {
  for (const auto& [ch, lv] : when) {
    auto h = schema.characteristic_index(ch);
    if (levels[h] != schema.level_index(h, lv)) return false;
  }
  return true;
}

bool same_set(const std::vector<bool>& a, const std::vector<bool>& b) { return a == b; }

bool subset(const std::vector<bool>& a, const std::vector<bool>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && !b[i]) return false;
  return true;
}

std::vector<bool> excluded_patterns(const bsgs::CovariateSchema& schema, std::span<const design::Exclusion> ex) {
  std::vector<bool> out(schema.num_patterns(), false);
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = design::is_excluded(ex, schema.pattern_levels(p));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// dose grid and data generation

std::vector<double> derive_dose_grid(const std::vector<double>& targets, const PkTruth& pk, double tau) {
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (!(targets[j] > 0.0 && targets[j] < 1.0)) throw InputError("grid targets must lie in (0, 1)", {"grid_targets"});
    if (j > 0 && targets[j] <= targets[j - 1]) throw InputError("grid targets must increase", {"grid_targets"});
  }
  std::vector<double> d(targets.size());
  for (std::size_t j = 0; j < targets.size(); ++j)
    d[j] = std::exp(std::log(pk.clearance_mean) + std::log(tau) + pk.omega * probit(targets[j]));
  return d;
}

std::vector<double> marginal_toxicity(const std::vector<double>& dosage, const PkTruth& pk) {
  std::vector<double> p(dosage.size());
  for (std::size_t j = 0; j < dosage.size(); ++j)
    p[j] = phi((std::log(dosage[j]) - std::log(pk.clearance_mean) - std::log(pk.tau_l)) / pk.omega);
  return p;
}

double fit_tau_l(const std::vector<double>& dosage, const std::vector<double>& tox, const PkTruth& pk) {
  if (dosage.size() != tox.size() || tox.empty()) throw InputError("toxicity truth must give one rate per level", {"tox_truth"});
  double s = 0.0;
  for (std::size_t j = 0; j < tox.size(); ++j) {
    if (!(tox[j] > 0.0 && tox[j] < 1.0)) throw InputError("toxicity truth must lie in (0, 1)", {"tox_truth"});
    s += std::log(dosage[j]) - std::log(pk.clearance_mean) - pk.omega * probit(tox[j]);
  }
  return std::exp(s / static_cast<double>(tox.size()));
}

std::vector<int> sample_patient(const bsgs::CovariateSchema& schema, Engine& rng) {
  std::vector<int> levels(schema.num_characteristics());
  for (std::size_t h = 0; h < levels.size(); ++h) {
    const auto& prev = schema.characteristics()[h].prevalence;
    double u = uniform01(rng);
    double acc = 0.0;
    int pick = -1;
    for (std::size_t l = 0; l < prev.size(); ++l) {
      acc += prev[l];
      if (u < acc) {
        pick = static_cast<int>(l);
        break;
      }
    }
    if (pick < 0) {
      // u landed in the rounding gap above the cumulative sum
      for (std::size_t l = prev.size(); l-- > 0;)
        if (prev[l] > 0.0) {
          pick = static_cast<int>(l);
          break;
        }
    }
    levels[h] = pick;
  }
  return levels;
}

ToxDraw simulate_toxicity(double dosage, const PkTruth& pk, Engine& rng) {
  double cl = std::exp(std::log(pk.clearance_mean) + pk.omega * standard_normal(rng));
  double auc = dosage / cl;
  return {auc > pk.tau_l, auc};
}

bool simulate_efficacy(double prob, Engine& rng) { return uniform01(rng) < prob; }

double event_time(double window, Engine& rng) {
  if (!(window > 0.0)) throw InputError("window must be positive", {"window"});
  return uniform01(rng) * window;
}

double interarrival(double rate, Engine& rng) { return std::exponential_distribution<double>(rate)(rng); }

// ---------------------------------------------------------------------------
// scenarios

DoseGrid Scenario::grid() const {
  auto sk = DoseGrid::default_skeleton();
  if (sk.size() != dosage.size()) {
    // evenly spread skeleton for grids other than the four-level example
    sk.resize(dosage.size());
    for (std::size_t j = 0; j < sk.size(); ++j) sk[j] = 0.05 + 0.45 * static_cast<double>(j) / static_cast<double>(sk.size());
  }
  return DoseGrid(dosage, sk);
}

void Scenario::finalize(double p_target) {
  dosage = derive_dose_grid(grid_targets, pk, grid_tau);
  if (!tox_truth.empty()) pk.tau_l = fit_tau_l(dosage, tox_truth, pk);
  true_tox = marginal_toxicity(dosage, pk);
  true_mtd = crm::closest_to_target(true_tox, p_target);

  const auto J = dosage.size();
  for (std::size_t r = 0; r < efficacy.size(); ++r) {
    const auto& rule = efficacy[r];
    const std::string path = "efficacy/" + std::to_string(r);
    if (rule.probs.size() != J) throw InputError("efficacy row needs one probability per level", {path + "/probs"});
    for (double p : rule.probs)
      if (!(p >= 0.0 && p <= 1.0)) throw InputError("efficacy probabilities must lie in [0, 1]", {path + "/probs"});
    if (rule.obd && (*rule.obd < 0 || static_cast<std::size_t>(*rule.obd) >= J))
      throw InputError("OBD outside the dose grid", {path + "/obd"});
    for (const auto& [ch, lv] : rule.when) {
      auto h = schema.characteristic_index(ch);
      if (schema.level_index(h, lv) < 0) throw InputError("unknown level " + lv, {path + "/when/" + ch});
    }
  }

  pattern_rule.assign(schema.num_patterns(), -1);
  for (std::size_t p = 0; p < pattern_rule.size(); ++p) {
    auto lv = schema.pattern_levels(p);
    for (std::size_t r = 0; r < efficacy.size(); ++r)
      if (matches(schema, efficacy[r].when, lv)) {
        pattern_rule[p] = static_cast<int>(r);
        break;
      }
    if (pattern_rule[p] < 0) throw InputError("scenario does not cover pattern " + schema.describe(lv), {"efficacy"});
  }

  auto declared = excluded_patterns(schema, futile_subgroups);
  for (std::size_t p = 0; p < pattern_rule.size(); ++p) {
    bool futile = !rule_for(p).obd.has_value();
    if (futile != declared[p])
      throw InputError("futile_subgroups disagree with the efficacy table at " + schema.describe(schema.pattern_levels(p)),
                       {"futile_subgroups"});
  }
}

Scenario scenario_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("scenario is not valid JSON: ") + e.what());
  }
  Scenario s;
  try {
    s.name = j.at("name").get<std::string>();
    s.description = j.value("description", "");
    if (j.contains("grid_targets")) s.grid_targets = j.at("grid_targets").get<std::vector<double>>();
    s.grid_tau = j.value("grid_tau", s.grid_tau);
    if (j.contains("tox_truth")) s.tox_truth = j.at("tox_truth").get<std::vector<double>>();
    if (j.contains("pk")) {
      const auto& pk = j.at("pk");
      s.pk.clearance_mean = pk.value("clearance_mean", s.pk.clearance_mean);
      s.pk.omega = pk.value("omega", s.pk.omega);
      s.pk.tau_l = pk.value("tau_l", s.pk.tau_l);
    }
    s.accrual_rate = j.value("accrual_rate", s.accrual_rate);
    s.tox_window = j.value("tox_window", s.tox_window);
    s.eff_window = j.value("eff_window", s.eff_window);
    s.schema = j.contains("schema") ? io::schema_from_json(j.at("schema")) : bsgs::motivating_example_schema();
    for (const auto& r : j.at("efficacy")) {
      EfficacyRule rule;
      rule.label = r.value("label", "");
      if (r.contains("when")) rule.when = r.at("when").get<std::map<std::string, std::string>>();
      rule.probs = r.at("probs").get<std::vector<double>>();
      if (r.contains("obd") && !r.at("obd").is_null()) rule.obd = r.at("obd").get<int>() - 1;
      s.efficacy.push_back(std::move(rule));
    }
    if (j.contains("futile_subgroups"))
      for (const auto& f : j.at("futile_subgroups")) {
        design::Exclusion e;
        e.characteristic = s.schema.characteristic_index(f.at("characteristic").get<std::string>());
        for (const auto& lv : f.at("levels")) {
          int l = s.schema.level_index(e.characteristic, lv.get<std::string>());
          if (l < 0) throw InputError("unknown level " + lv.get<std::string>(), {"futile_subgroups"});
          e.levels.push_back(l);
        }
        s.futile_subgroups.push_back(std::move(e));
      }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed scenario: ") + e.what());
  }
  if (!(s.accrual_rate > 0.0)) throw InputError("accrual_rate must be positive", {"accrual_rate"});
  if (!(s.pk.omega > 0.0) || !(s.pk.clearance_mean > 0.0)) throw InputError("PK truth must be positive", {"pk"});
  s.finalize();
  return s;
}

Scenario load_scenario(const std::string& path) { return scenario_from_json(read_file(path)); }

std::string scenario_to_json(const Scenario& s) {
  Json eff = Json::array();
  for (const auto& r : s.efficacy)
    eff.push_back({{"label", r.label},
                   {"when", r.when},
                   {"probs", r.probs},
                   {"obd", r.obd ? Json(*r.obd + 1) : Json(nullptr)}});
  Json futile = Json::array();
  for (const auto& e : s.futile_subgroups) {
    const auto& ch = s.schema.characteristics()[e.characteristic];
    Json lv = Json::array();
    for (int l : e.levels) lv.push_back(ch.levels[static_cast<std::size_t>(l)]);
    futile.push_back({{"characteristic", ch.name}, {"levels", lv}});
  }
  Json j = {{"name", s.name},
            {"description", s.description},
            {"grid_targets", s.grid_targets},
            {"grid_tau", s.grid_tau},
            {"pk", {{"clearance_mean", s.pk.clearance_mean}, {"omega", s.pk.omega}, {"tau_l", s.pk.tau_l}}},
            {"accrual_rate", s.accrual_rate},
            {"tox_window", s.tox_window},
            {"eff_window", s.eff_window},
            {"schema", io::to_json(s.schema)},
            {"efficacy", eff},
            {"futile_subgroups", futile}};
  if (!s.tox_truth.empty()) j["tox_truth"] = s.tox_truth;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// patient source

ScenarioSource::ScenarioSource(const Scenario& scenario, std::uint64_t seed, std::uint64_t replicate)
    : scenario_(scenario), seed_(seed), replicate_(replicate) {}

std::optional<design::Candidate> ScenarioSource::next() {
  auto rng = make_engine(seed_, replicate_, Stream::Patients, index_++);
  clock_ += interarrival(scenario_.accrual_rate, rng);
  auto levels = sample_patient(scenario_.schema, rng);
  Latent l;
  l.clearance = std::exp(std::log(scenario_.pk.clearance_mean) + scenario_.pk.omega * standard_normal(rng));
  l.u_eff = uniform01(rng);
  l.tox_time = event_time(scenario_.tox_window, rng);
  l.eff_time = event_time(scenario_.eff_window, rng);
  latent_.push_back(l);
  levels_.push_back(levels);
  return design::Candidate{clock_, std::move(levels)};
}

design::Outcomes ScenarioSource::outcomes(const design::Candidate& candidate, Level dose) {
  // outcomes always follow the candidate just drawn
  if (latent_.empty() || levels_.back() != candidate.levels) throw StateError("outcomes requested for an unknown candidate");
  const auto& l = latent_.back();
  design::Outcomes o;
  o.auc = scenario_.dosage[static_cast<std::size_t>(dose)] / l.clearance;
  o.toxic = o.auc > scenario_.pk.tau_l;
  o.tox_time = o.toxic ? l.tox_time : scenario_.tox_window;
  auto pattern = scenario_.schema.pattern_index(candidate.levels);
  o.responded = l.u_eff < scenario_.rule_for(pattern).probs[static_cast<std::size_t>(dose)];
  o.eff_time = o.responded ? l.eff_time : scenario_.eff_window;
  return o;
}

// ---------------------------------------------------------------------------
// trials

const char* to_string(Design design) {
  switch (design) {
    case Design::Optimal: return "optimal";
    case Design::Naive: return "naive";
    case Design::NoPk: return "nopk";
  }
  return "?";
}

Design design_from_string(const std::string& name) {
  if (name == "optimal") return Design::Optimal;
  if (name == "naive") return Design::Naive;
  if (name == "nopk") return Design::NoPk;
  throw InputError("unknown design '" + name + "'", {"design"});
}

design::DesignConfig make_config(Design design, int n_max, const Scenario& scenario) {
  design::DesignConfig c;
  c.n2 = n_max - c.n1;
  c.pk_enabled = design != Design::NoPk;
  c.heterogeneity_enabled = design != Design::Naive;
  c.tox_window = scenario.tox_window;
  c.eff_window = scenario.eff_window;
  c.pk_threshold = scenario.pk.tau_l;
  c.pk_mean_clearance = scenario.pk.clearance_mean;
  c.validate();
  return c;
}

TrialResult run_trial(const Scenario& scenario, const design::DesignConfig& config, std::uint64_t seed,
                      std::uint64_t replicate, RunMode mode, bool oracle_exclusions) {
  design::Trial trial(config, scenario.grid(), scenario.schema, seed, replicate);
  ScenarioSource source(scenario, seed, replicate);
  design::run_escalation(trial, source);
  if (oracle_exclusions)
    for (auto e : scenario.futile_subgroups) {
      e.assessment = 0;
      trial.impose_exclusion(std::move(e));
    }
  if (mode == RunMode::EscalationOnly)
    trial.advance(std::max(trial.state().now, *trial.ready_time()));
  else
    design::run_to_completion(trial, source);
  return {seed, replicate, trial.state()};
}

// ---------------------------------------------------------------------------
// metrics

std::vector<bool> true_futile_patterns(const Scenario& scenario) {
  std::vector<bool> out(scenario.schema.num_patterns());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = !scenario.rule_for(p).obd.has_value();
  return out;
}

std::vector<Subgroup> true_subgroups(const Scenario& scenario) {
  std::vector<Subgroup> groups;
  const auto& schema = scenario.schema;
  for (std::size_t p = 0; p < schema.num_patterns(); ++p) {
    const auto& rule = scenario.rule_for(p);
    if (!rule.obd) continue;
    double w = schema.pattern_prevalence(schema.pattern_levels(p));
    if (w <= 0.0) continue;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Subgroup& g) { return g.obd == *rule.obd; });
    if (it == groups.end()) {
      groups.push_back({rule.label, *rule.obd, {}, {}});
      it = std::prev(groups.end());
    } else if (!rule.label.empty() && it->name.find(rule.label) == std::string::npos) {
      it->name += it->name.empty() ? rule.label : " / " + rule.label;
    }
    it->patterns.push_back(p);
    it->weights.push_back(w);
  }
  for (auto& g : groups) {
    double t = 0.0;
    for (double w : g.weights) t += w;
    for (double& w : g.weights) w /= t;
  }
  std::sort(groups.begin(), groups.end(), [](const Subgroup& a, const Subgroup& b) { return a.obd < b.obd; });
  return groups;
}

bsgs::IndicatorMask influential_indicators(const Scenario& scenario, const bsgs::CovariateSchema& schema) {
  bsgs::IndicatorMask out = 0;
  const auto& inds = schema.indicators();
  for (std::size_t k = 0; k < inds.size(); ++k) {
    const auto h = inds[k].characteristic;
    const int ref = static_cast<int>(schema.characteristics()[h].reference);
    for (std::size_t p = 0; p < schema.num_patterns() && !(out >> k & 1u); ++p) {
      auto lv = schema.pattern_levels(p);
      if (lv[h] != ref || schema.pattern_prevalence(lv) <= 0.0) continue;
      const auto& a = scenario.rule_for(p).obd;
      if (!a) continue;
      lv[h] = static_cast<int>(inds[k].level);
      if (schema.pattern_prevalence(lv) <= 0.0) continue;
      const auto& b = scenario.rule_for(schema.pattern_index(lv)).obd;
      if (b && *a != *b) out |= 1u << k;
    }
  }
  return out;
}

TrialSummary summarize(const Scenario& scenario, const bsgs::CovariateSchema& schema, const design::TrialState& state) {
  TrialSummary s;
  const auto J = scenario.num_levels();
  const auto P = schema.num_patterns();
  const bool terminated = state.stage == design::Stage::TerminatedFutile;

  s.allocation.assign(J, 0);
  for (const auto& p : state.patients) ++s.allocation[static_cast<std::size_t>(p.dose)];
  s.n_patients = static_cast<int>(state.patients.size());
  if (state.pk) {
    s.mtd_star = state.pk->mtd_star;
    s.mtd_tox = state.pk->mtd_tox;
  }

  std::vector<bool> live(P);
  for (std::size_t p = 0; p < P; ++p) live[p] = schema.pattern_prevalence(schema.pattern_levels(p)) > 0.0;
  auto truth = true_futile_patterns(scenario);
  for (std::size_t p = 0; p < P; ++p) truth[p] = truth[p] && live[p];

  // cumulative eliminations after each assessment
  std::vector<std::vector<bool>> stages;
  for (int a = 1; a <= 2; ++a) {
    std::vector<design::Exclusion> ex;
    for (const auto& e : state.exclusions)
      if (e.assessment <= a) ex.push_back(e);
    auto set = excluded_patterns(schema, ex);
    for (std::size_t p = 0; p < P; ++p) set[p] = set[p] && live[p];
    stages.push_back(std::move(set));
  }
  std::vector<bool> final_set(P, false);
  for (std::size_t p = 0; p < P; ++p)
    final_set[p] = live[p] && (!state.obd || !design::recommended_obd(state, schema, schema.pattern_levels(p)));
  stages.push_back(final_set);

  const auto groups = true_subgroups(scenario);
  s.pcs.assign(groups.size(), 0.0);
  s.recommended.assign(groups.size(), std::vector<double>(J, 0.0));

  if (terminated) {
    s.identification = Identification::EarlyStop;
  } else {
    bool truth_empty = std::none_of(truth.begin(), truth.end(), [](bool b) { return b; });
    if (same_set(final_set, truth)) {
      s.identification = Identification::Correct;
      if (!truth_empty)
        for (int a = 0; a < 3; ++a)
          if (same_set(stages[static_cast<std::size_t>(a)], truth)) {
            s.identified_at = a + 1;
            break;
          }
    }
    s.incorrect_subgroup = !subset(final_set, truth);
    for (const auto& g : scenario.futile_subgroups) {
      auto members = excluded_patterns(schema, std::span(&g, 1));
      bool all = true;
      for (std::size_t p = 0; p < P; ++p)
        if (members[p] && live[p] && !final_set[p]) all = false;
      if (all) s.partial = true;
    }
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t m = 0; m < groups[g].patterns.size(); ++m) {
        auto rec = design::recommended_obd(state, schema, schema.pattern_levels(groups[g].patterns[m]));
        if (!rec) continue;
        s.recommended[g][static_cast<std::size_t>(*rec)] += groups[g].weights[m];
        if (*rec == groups[g].obd) s.pcs[g] += groups[g].weights[m];
      }
    if (state.obd) {
      const auto infl = influential_indicators(scenario, schema);
      const auto all = schema.all_indicators();
      const auto sel = state.obd->selected;
      auto rate = [](bsgs::IndicatorMask hit, bsgs::IndicatorMask of) -> std::optional<double> {
        if (!of) return std::nullopt;
        return static_cast<double>(std::popcount(hit & of)) / static_cast<double>(std::popcount(of));
      };
      s.tpr = rate(sel, infl);
      s.fpr = rate(sel, all & ~infl);
    }
  }
  return s;
}

StudyMetrics aggregate(const Scenario& scenario, Design design, int n_max, const std::vector<TrialSummary>& trials) {
  StudyMetrics m;
  m.scenario = scenario.name;
  m.design = to_string(design);
  m.n_max = n_max;
  m.reps = static_cast<int>(trials.size());
  const auto J = scenario.num_levels();
  const auto groups = true_subgroups(scenario);
  for (const auto& g : groups) {
    m.subgroup_names.push_back(g.name);
    m.subgroup_obd.push_back(g.obd);
  }
  m.pcs.assign(groups.size(), 0.0);
  m.recommended.assign(groups.size(), std::vector<double>(J, 0.0));
  m.allocation.assign(J, 0.0);
  if (trials.empty()) return m;

  const double n = static_cast<double>(trials.size());
  double tpr = 0.0, fpr = 0.0, partial = 0.0;
  int n_tpr = 0, n_fpr = 0, n_set = 0;
  for (const auto& t : trials) {
    switch (t.identification) {
      case Identification::Correct:
        m.correct += 1.0;
        if (t.identified_at > 0) m.correct_by_assessment[static_cast<std::size_t>(t.identified_at - 1)] += 1.0;
        break;
      case Identification::Incorrect: m.incorrect += 1.0; break;
      case Identification::EarlyStop: m.early_stop += 1.0; break;
    }
    if (t.incorrect_subgroup) m.incorrect_subgroup += 1.0;
    if (t.partial) partial += 1.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      m.pcs[g] += t.pcs[g];
      for (std::size_t j = 0; j < J; ++j) m.recommended[g][j] += t.recommended[g][j];
    }
    if (t.tpr) {
      tpr += *t.tpr;
      ++n_tpr;
    }
    if (t.fpr) {
      fpr += *t.fpr;
      ++n_fpr;
    }
    for (std::size_t j = 0; j < J; ++j) m.allocation[j] += t.allocation[j];
    m.mean_patients += t.n_patients;
    if (t.mtd_star) {
      ++n_set;
      if (*t.mtd_star == scenario.true_mtd) m.set_correct += 1.0;
      else if (*t.mtd_star > scenario.true_mtd) m.set_overdose += 1.0;
      else m.set_missed += 1.0;
    }
  }
  m.correct /= n;
  for (auto& c : m.correct_by_assessment) c /= n;
  m.incorrect /= n;
  m.incorrect_subgroup /= n;
  m.early_stop /= n;
  if (scenario.futile_subgroups.size() > 1) m.partial = partial / n;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    m.pcs[g] /= n;
    for (auto& r : m.recommended[g]) r /= n;
  }
  if (design != Design::Naive) {
    if (n_tpr) m.tpr = 100.0 * tpr / n_tpr;
    if (n_fpr) m.fpr = 100.0 * fpr / n_fpr;
  }
  for (auto& a : m.allocation) a /= n;
  m.mean_patients /= n;
  if (n_set) {
    m.set_correct /= n_set;
    m.set_overdose /= n_set;
    m.set_missed /= n_set;
  }
  return m;
}

bsgs::CovariateSchema apply_reference(const bsgs::CovariateSchema& schema, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) throw InputError("reference must look like characteristic=level", {"reference"});
  return schema.with_reference(spec.substr(0, eq), spec.substr(eq + 1));
}

StudyResult run_study(const Scenario& base, const StudyOptions& options) {
  if (options.reps < 1) throw InputError("reps must be at least 1", {"reps"});
  Scenario scenario = base;
  if (options.reference) scenario.schema = apply_reference(base.schema, *options.reference);
  const auto config = make_config(options.design, options.n_max, scenario);
  const bool oracle = options.design == Design::Naive;

  StudyResult out;
  out.trials.resize(static_cast<std::size_t>(options.reps));
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (int r; (r = next++) < options.reps;) {
      try {
        out.trials[static_cast<std::size_t>(r)] =
            run_trial(scenario, config, options.seed, static_cast<std::uint64_t>(r), options.mode, oracle);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = options.reps;
      }
    }
  };
  const int threads = std::max(1, std::min(options.threads, options.reps));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& t : out.trials) out.summaries.push_back(summarize(scenario, scenario.schema, t.state));
  out.metrics = aggregate(scenario, options.design, options.n_max, out.summaries);
  return out;
}

// ---------------------------------------------------------------------------
// output files

namespace {

Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

std::string metrics_to_json(const StudyMetrics& m) {
  Json obd = Json::array();
  for (auto l : m.subgroup_obd) obd.push_back(l + 1);
  Json j = {{"scenario", m.scenario},
            {"design", m.design},
            {"n_max", m.n_max},
            {"reps", m.reps},
            {"target_population",
             {{"correct", m.correct},
              {"correct_by_assessment", m.correct_by_assessment},
              {"incorrect", m.incorrect},
              {"incorrect_subgroup", m.incorrect_subgroup},
              {"partial", opt_json(m.partial)},
              {"early_stop", m.early_stop}}},
            {"tpr", opt_json(m.tpr)},
            {"fpr", opt_json(m.fpr)},
            {"subgroups", m.subgroup_names},
            {"subgroup_obd", obd},
            {"pcs", m.pcs},
            {"recommended", m.recommended},
            {"allocation", m.allocation},
            {"acceptable_set", {{"correct", m.set_correct}, {"overdose_included", m.set_overdose}, {"max_missed", m.set_missed}}},
            {"mean_patients", m.mean_patients}};
  return j.dump(2) + "\n";
}

std::string pcs_csv(const StudyMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << "subgroup,true_obd,pcs";
  const auto J = m.allocation.size();
  for (std::size_t j = 0; j < J; ++j) os << ",rec_d" << j + 1;
  os << "\n";
  for (std::size_t g = 0; g < m.pcs.size(); ++g) {
    os << '"' << m.subgroup_names[g] << "\"," << m.subgroup_obd[g] + 1 << ',' << m.pcs[g];
    for (double r : m.recommended[g]) os << ',' << r;
    os << "\n";
  }
  return os.str();
}

std::string futility_csv(const std::vector<TrialResult>& trials, const bsgs::CovariateSchema& schema) {
  std::ostringstream os;
  os << std::setprecision(17)
     << "replicate,assessment,time,influential,subgroup_value,prob_exceed,n_treated,criterion_met,eliminated,trial_stop\n";
  for (const auto& t : trials)
    for (const auto& f : t.state.futility) {
      std::string name = f.influential ? schema.indicators()[static_cast<std::size_t>(*f.influential)].name : "";
      if (f.subgroups.empty()) {
        os << t.replicate << ',' << f.assessment << ',' << f.time << ',' << name << ",,,,,," << f.trial_stop << "\n";
        continue;
      }
      for (const auto& g : f.subgroups)
        os << t.replicate << ',' << f.assessment << ',' << f.time << ',' << name << ',' << g.value << ','
           << g.prob_exceed << ',' << g.n_treated << ',' << g.criterion_met << ',' << g.eliminated << ','
           << f.trial_stop << "\n";
    }
  return os.str();
}

std::string allocation_csv(const StudyMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << "level,mean_patients\n";
  for (std::size_t j = 0; j < m.allocation.size(); ++j) os << j + 1 << ',' << m.allocation[j] << "\n";
  return os.str();
}

std::string trace_json(const Scenario& scenario, Design design, const design::DesignConfig& config,
                       const bsgs::CovariateSchema& schema, const TrialResult& trial) {
  Json j = {{"scenario", scenario.name},
            {"design", to_string(design)},
            {"seed", trial.seed},
            {"replicate", trial.replicate},
            {"config", io::to_json(config)},
            {"schema", io::to_json(schema)},
            {"state", io::to_json(trial.state)}};
  return j.dump() + "\n";
}

void write_outputs(const std::string& dir, const Scenario& scenario, const StudyOptions& options,
                   const StudyResult& result, bool traces) {
  fs::path out(dir);
  fs::create_directories(out);
  write_file(out / "metrics.json", metrics_to_json(result.metrics));
  write_file(out / "pcs.csv", pcs_csv(result.metrics));
  auto schema = options.reference ? apply_reference(scenario.schema, *options.reference) : scenario.schema;
  write_file(out / "futility.csv", futility_csv(result.trials, schema));
  write_file(out / "allocation.csv", allocation_csv(result.metrics));
  write_file(out / "scenario.json", scenario_to_json(scenario));
  if (!traces) return;
  fs::create_directories(out / "traces");
  const auto config = make_config(options.design, options.n_max, scenario);
  for (const auto& t : result.trials) {
    char name[32];
    std::snprintf(name, sizeof name, "rep_%04llu.json", static_cast<unsigned long long>(t.replicate));
    write_file(out / "traces" / name, trace_json(scenario, options.design, config, schema, t));
  }
}

StudyMetrics metrics_from_traces(const std::string& dir) {
  fs::path root(dir);
  Scenario scenario = load_scenario((root / "scenario.json").string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root / "traces"))
    if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) throw InputError("no traces under " + (root / "traces").string());
  std::sort(files.begin(), files.end());

  std::vector<TrialSummary> summaries;
  std::optional<Design> design;
  int n_max = 0;
  for (const auto& f : files) {
    Json j = Json::parse(read_file(f.string()));
    auto d = design_from_string(j.at("design").get<std::string>());
    auto config = io::config_from_json(j.at("config"));
    if (design && *design != d) throw InputError("traces mix designs", {f.string()});
    design = d;
    n_max = config.n_max();
    auto schema = io::schema_from_json(j.at("schema"));
    Scenario s = scenario;
    s.schema = schema;
    summaries.push_back(summarize(s, schema, io::state_from_json(j.at("state"))));
  }
  return aggregate(scenario, *design, n_max, summaries);
}

}  // namespace doseopt::sim
