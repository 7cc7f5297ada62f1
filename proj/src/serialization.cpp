#include "doseopt/serialization.hpp"

#include <algorithm>
#include <set>
#include <string>

#include "doseopt/error.hpp"

namespace doseopt::io {

using namespace design;

namespace {

template <class T>
Json opt(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <class T>
std::optional<T> get_opt(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

// Runs f, turning JSON type and key errors into InputError naming `path`.
template <class F>
auto guarded(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": " + e.what(), {path});
  }
}

void check_version(const Json& j, const char* what) {
  if (j.contains("schema_version") && j.at("schema_version") != TrialState::kSchemaVersion)
    throw InputError(std::string("unsupported ") + what + " schema version", {"schema_version"});
}

Json sampler_json(const bsgs::SamplerConfig& c) {
  return {{"chains", c.chains},
          {"iterations", c.iterations},
          {"burn_in", c.burn_in},
          {"alpha_prior_var", c.alpha_prior_var},
          {"parallel_chains", c.parallel_chains}};
}

Json pk_sampler_json(const pk::PkSamplerConfig& c) {
  return {{"draws", c.draws}, {"burn_in", c.burn_in}, {"sigma_step", c.sigma_step}};
}

template <class T>
void read_field(const Json& j, const char* key, T& out, std::vector<std::string>& bad, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    bad.push_back(prefix + key);
  }
}

Json decision_json(const DoseDecision& d) {
  return {{"patient", d.patient},
          {"stage", to_string(d.stage)},
          {"time", d.time},
          {"dose", d.dose},
          {"tox_probs", d.tox_probs},
          {"eff_estimates", d.eff_estimates},
          {"admissible", d.admissible},
          {"inclusion", d.inclusion},
          {"selected", d.selected},
          {"empty_admissible", d.empty_admissible},
          {"conditioning_fallback", d.conditioning_fallback}};
}

DoseDecision decision_from(const Json& j) {
  DoseDecision d;
  d.patient = j.at("patient").get<int>();
  d.stage = stage_from_string(j.at("stage").get<std::string>());
  d.time = j.at("time").get<double>();
  d.dose = j.at("dose").get<Level>();
  d.tox_probs = j.at("tox_probs").get<std::vector<double>>();
  d.eff_estimates = j.at("eff_estimates").get<std::vector<double>>();
  d.admissible = j.at("admissible").get<std::vector<Level>>();
  d.inclusion = j.at("inclusion").get<std::vector<double>>();
  d.selected = j.at("selected").get<bsgs::IndicatorMask>();
  d.empty_admissible = j.at("empty_admissible").get<bool>();
  d.conditioning_fallback = j.at("conditioning_fallback").get<bool>();
  return d;
}

Json patient_json(const PatientRecord& p) {
  return {{"id", p.id},
          {"arrival", p.arrival},
          {"levels", p.levels},
          {"z", p.z},
          {"dose", p.dose},
          {"stage", to_string(p.stage)},
          {"toxic", opt(p.toxic)},
          {"tox_time", p.tox_time},
          {"responded", opt(p.responded)},
          {"eff_time", p.eff_time},
          {"auc", opt(p.auc)}};
}

PatientRecord patient_from(const Json& j) {
  PatientRecord p;
  p.id = j.at("id").get<int>();
  p.arrival = j.at("arrival").get<double>();
  p.levels = j.at("levels").get<std::vector<int>>();
  p.z = j.at("z").get<bsgs::IndicatorMask>();
  p.dose = j.at("dose").get<Level>();
  p.stage = stage_from_string(j.at("stage").get<std::string>());
  p.toxic = get_opt<bool>(j, "toxic");
  p.tox_time = j.at("tox_time").get<double>();
  p.responded = get_opt<bool>(j, "responded");
  p.eff_time = j.at("eff_time").get<double>();
  p.auc = get_opt<double>(j, "auc");
  return p;
}

FutilityOutcome futility_from(const Json& j) {
  FutilityOutcome f;
  f.assessment = j.at("assessment").get<int>();
  f.time = j.at("time").get<double>();
  f.inclusion = j.at("inclusion").get<std::vector<double>>();
  f.influential = get_opt<int>(j, "influential");
  for (const auto& s : j.at("subgroups")) {
    SubgroupTest t;
    t.value = s.at("value").get<int>();
    t.prob_exceed = s.at("prob_exceed").get<double>();
    t.n_treated = s.at("n_treated").get<int>();
    t.criterion_met = s.at("criterion_met").get<bool>();
    t.eliminated = s.at("eliminated").get<bool>();
    f.subgroups.push_back(t);
  }
  f.trial_stop = j.at("trial_stop").get<bool>();
  f.conditioning_fallback = j.at("conditioning_fallback").get<bool>();
  return f;
}

PkAdjustment pk_from(const Json& j) {
  PkAdjustment a;
  a.time = j.at("time").get<double>();
  a.tox_mean_a = j.at("tox_mean_a").get<double>();
  a.scaled = j.at("scaled").get<std::vector<double>>();
  a.mtd_tox = j.at("mtd_tox").get<Level>();
  a.mtd_pk = get_opt<Level>(j, "mtd_pk");
  a.pk_exceed = j.at("pk_exceed").get<std::vector<double>>();
  a.mtd_star = j.at("mtd_star").get<Level>();
  a.acceptable_tox = j.at("acceptable_tox").get<std::vector<Level>>();
  return a;
}

ObdReport obd_from(const Json& j) {
  ObdReport r;
  r.time = j.at("time").get<double>();
  r.tox_probs = j.at("tox_probs").get<std::vector<double>>();
  r.mtd = j.at("mtd").get<Level>();
  r.acceptable = j.at("acceptable").get<std::vector<Level>>();
  r.inclusion = j.at("inclusion").get<std::vector<double>>();
  r.active = j.at("active").get<bsgs::IndicatorMask>();
  r.selected = j.at("selected").get<bsgs::IndicatorMask>();
  for (const auto& e : j.at("entries")) {
    ObdEntry o;
    o.z = e.at("z").get<bsgs::IndicatorMask>();
    o.label = e.at("label").get<std::string>();
    o.obd = get_opt<Level>(e, "obd");
    o.mean_eff = e.at("mean_eff").get<std::vector<double>>();
    o.prob_near_max = e.at("prob_near_max").get<std::vector<double>>();
    o.prob_exceed_cf = e.at("prob_exceed_cf").get<double>();
    o.futile = e.at("futile").get<bool>();
    o.excluded = e.at("excluded").get<bool>();
    o.conditioning_fallback = e.at("conditioning_fallback").get<bool>();
    r.entries.push_back(std::move(o));
  }
  return r;
}

}  // namespace

Json to_json(const DesignConfig& c) {
  return {{"n1", c.n1},
          {"n2", c.n2},
          {"r", c.r},
          {"p_target", c.p_target},
          {"psi_e", c.psi_e},
          {"psi_f", c.psi_f},
          {"psi_obd", c.psi_obd},
          {"c_f", c.c_f},
          {"lambda", c.lambda},
          {"delta", c.delta},
          {"kappa", c.kappa},
          {"s_min", c.s_min},
          {"epsilon", c.epsilon},
          {"alpha_base", c.alpha_base},
          {"alpha_decay", c.alpha_decay},
          {"futility_min_1", c.futility_min_1},
          {"futility_min_2", c.futility_min_2},
          {"pk_enabled", c.pk_enabled},
          {"heterogeneity_enabled", c.heterogeneity_enabled},
          {"escalation_full_observation", c.escalation_full_observation},
          {"cohort_size", c.cohort_size},
          {"tox_window", c.tox_window},
          {"eff_window", c.eff_window},
          {"tox_prior_sd", c.tox_prior_sd},
          {"pk_threshold", c.pk_threshold},
          {"pk_mean_clearance", c.pk_mean_clearance},
          {"min_conditional_draws", c.min_conditional_draws},
          {"mcmc", sampler_json(c.mcmc)},
          {"pk_mcmc", pk_sampler_json(c.pk_mcmc)}};
}

DesignConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw InputError("design configuration must be an object", {""});
  DesignConfig c;
  std::vector<std::string> bad;
  const Json defaults = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) bad.push_back(key);
  read_field(j, "n1", c.n1, bad, "");
  read_field(j, "n2", c.n2, bad, "");
  read_field(j, "r", c.r, bad, "");
  read_field(j, "p_target", c.p_target, bad, "");
  read_field(j, "psi_e", c.psi_e, bad, "");
  read_field(j, "psi_f", c.psi_f, bad, "");
  read_field(j, "psi_obd", c.psi_obd, bad, "");
  read_field(j, "c_f", c.c_f, bad, "");
  read_field(j, "lambda", c.lambda, bad, "");
  read_field(j, "delta", c.delta, bad, "");
  read_field(j, "kappa", c.kappa, bad, "");
  read_field(j, "s_min", c.s_min, bad, "");
  read_field(j, "epsilon", c.epsilon, bad, "");
  read_field(j, "alpha_base", c.alpha_base, bad, "");
  read_field(j, "alpha_decay", c.alpha_decay, bad, "");
  read_field(j, "futility_min_1", c.futility_min_1, bad, "");
  read_field(j, "futility_min_2", c.futility_min_2, bad, "");
  read_field(j, "pk_enabled", c.pk_enabled, bad, "");
  read_field(j, "heterogeneity_enabled", c.heterogeneity_enabled, bad, "");
  read_field(j, "escalation_full_observation", c.escalation_full_observation, bad, "");
  read_field(j, "cohort_size", c.cohort_size, bad, "");
  read_field(j, "tox_window", c.tox_window, bad, "");
  read_field(j, "eff_window", c.eff_window, bad, "");
  read_field(j, "tox_prior_sd", c.tox_prior_sd, bad, "");
  read_field(j, "pk_threshold", c.pk_threshold, bad, "");
  read_field(j, "pk_mean_clearance", c.pk_mean_clearance, bad, "");
  read_field(j, "min_conditional_draws", c.min_conditional_draws, bad, "");
  if (j.contains("mcmc")) {
    const auto& m = j.at("mcmc");
    read_field(m, "chains", c.mcmc.chains, bad, "mcmc/");
    read_field(m, "iterations", c.mcmc.iterations, bad, "mcmc/");
    read_field(m, "burn_in", c.mcmc.burn_in, bad, "mcmc/");
    read_field(m, "alpha_prior_var", c.mcmc.alpha_prior_var, bad, "mcmc/");
    read_field(m, "parallel_chains", c.mcmc.parallel_chains, bad, "mcmc/");
  }
  if (j.contains("pk_mcmc")) {
    const auto& m = j.at("pk_mcmc");
    read_field(m, "draws", c.pk_mcmc.draws, bad, "pk_mcmc/");
    read_field(m, "burn_in", c.pk_mcmc.burn_in, bad, "pk_mcmc/");
    read_field(m, "sigma_step", c.pk_mcmc.sigma_step, bad, "pk_mcmc/");
  }
  if (!bad.empty()) {
    std::string msg = "malformed design configuration:";
    for (const auto& b : bad) msg += " " + b;
    throw InputError(msg, bad);
  }
  c.validate();
  return c;
}

Json to_json(const DoseGrid& g) {
  return {{"dosage", std::vector<double>(g.dosage().begin(), g.dosage().end())},
          {"skeleton", std::vector<double>(g.skeleton().begin(), g.skeleton().end())}};
}

DoseGrid grid_from_json(const Json& j) {
  return guarded("grid", [&] {
    return DoseGrid(j.at("dosage").get<std::vector<double>>(), j.at("skeleton").get<std::vector<double>>());
  });
}

Json to_json(const bsgs::CovariateSchema& s) {
  Json chars = Json::array();
  for (const auto& c : s.characteristics()) {
    chars.push_back({{"name", c.name},
                     {"levels", c.levels},
                     {"prevalence", c.prevalence},
                     {"reference", c.levels[c.reference]},
                     {"response_order", c.response_order},
                     {"slab_sd", c.slab_sd},
                     {"q_group", c.q_group},
                     {"q_level", c.q_level}});
  }
  return {{"characteristics", chars}};
}

bsgs::CovariateSchema schema_from_json(const Json& j) {
  std::vector<bsgs::Characteristic> chars;
  const auto& arr = guarded("characteristics", [&]() -> const Json& { return j.at("characteristics"); });
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "characteristics/" + std::to_string(i);
    chars.push_back(guarded(path, [&] {
      const auto& c = arr.at(i);
      bsgs::Characteristic ch;
      ch.name = c.at("name").get<std::string>();
      ch.levels = c.at("levels").get<std::vector<std::string>>();
      ch.prevalence = c.at("prevalence").get<std::vector<double>>();
      const auto ref = c.at("reference").get<std::string>();
      const auto it = std::find(ch.levels.begin(), ch.levels.end(), ref);
      if (it == ch.levels.end()) throw InputError("reference level not among levels", {path + "/reference"});
      ch.reference = static_cast<std::size_t>(it - ch.levels.begin());
      if (c.contains("response_order")) ch.response_order = c.at("response_order").get<std::vector<std::string>>();
      if (c.contains("slab_sd")) ch.slab_sd = c.at("slab_sd").get<double>();
      if (c.contains("q_group")) ch.q_group = c.at("q_group").get<double>();
      if (c.contains("q_level")) ch.q_level = c.at("q_level").get<double>();
      return ch;
    }));
  }
  return bsgs::CovariateSchema(std::move(chars));
}

Json to_json(const FutilityOutcome& f) {
  Json subs = Json::array();
  for (const auto& t : f.subgroups)
    subs.push_back({{"value", t.value},
                    {"prob_exceed", t.prob_exceed},
                    {"n_treated", t.n_treated},
                    {"criterion_met", t.criterion_met},
                    {"eliminated", t.eliminated}});
  return {{"assessment", f.assessment},
          {"time", f.time},
          {"inclusion", f.inclusion},
          {"influential", opt(f.influential)},
          {"subgroups", subs},
          {"trial_stop", f.trial_stop},
          {"conditioning_fallback", f.conditioning_fallback}};
}

Json to_json(const PkAdjustment& a) {
  return {{"time", a.time},
          {"tox_mean_a", a.tox_mean_a},
          {"scaled", a.scaled},
          {"mtd_tox", a.mtd_tox},
          {"mtd_pk", opt(a.mtd_pk)},
          {"pk_exceed", a.pk_exceed},
          {"mtd_star", a.mtd_star},
          {"acceptable_tox", a.acceptable_tox}};
}

Json to_json(const ObdReport& r) {
  Json entries = Json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"z", e.z},
                       {"label", e.label},
                       {"obd", opt(e.obd)},
                       {"mean_eff", e.mean_eff},
                       {"prob_near_max", e.prob_near_max},
                       {"prob_exceed_cf", e.prob_exceed_cf},
                       {"futile", e.futile},
                       {"excluded", e.excluded},
                       {"conditioning_fallback", e.conditioning_fallback}});
  return {{"time", r.time},
          {"tox_probs", r.tox_probs},
          {"mtd", r.mtd},
          {"acceptable", r.acceptable},
          {"inclusion", r.inclusion},
          {"active", r.active},
          {"selected", r.selected},
          {"entries", entries}};
}

Json to_json(const TrialState& s) {
  Json patients = Json::array();
  for (const auto& p : s.patients) patients.push_back(patient_json(p));
  Json exclusions = Json::array();
  for (const auto& e : s.exclusions)
    exclusions.push_back({{"characteristic", e.characteristic}, {"levels", e.levels}, {"assessment", e.assessment}});
  Json decisions = Json::array();
  for (const auto& d : s.decisions) decisions.push_back(decision_json(d));
  Json futility = Json::array();
  for (const auto& f : s.futility) futility.push_back(to_json(f));
  return {{"schema_version", TrialState::kSchemaVersion},
          {"stage", to_string(s.stage)},
          {"now", s.now},
          {"seed", s.seed},
          {"replicate", s.replicate},
          {"patients", patients},
          {"acceptable", s.acceptable},
          {"exclusions", exclusions},
          {"decisions", decisions},
          {"futility", futility},
          {"pk", s.pk ? to_json(*s.pk) : Json(nullptr)},
          {"obd", s.obd ? to_json(*s.obd) : Json(nullptr)},
          {"empty_admissible_events", s.empty_admissible_events},
          {"stop_reason", s.stop_reason}};
}

TrialState state_from_json(const Json& j) {
  check_version(j, "trial state");
  return guarded("state", [&] {
    TrialState s;
    s.stage = stage_from_string(j.at("stage").get<std::string>());
    s.now = j.at("now").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.replicate = j.at("replicate").get<std::uint64_t>();
    for (const auto& p : j.at("patients")) s.patients.push_back(patient_from(p));
    s.acceptable = j.at("acceptable").get<std::vector<Level>>();
    for (const auto& e : j.at("exclusions"))
      s.exclusions.push_back({e.at("characteristic").get<std::size_t>(), e.at("levels").get<std::vector<int>>(),
                              e.at("assessment").get<int>()});
    for (const auto& d : j.at("decisions")) s.decisions.push_back(decision_from(d));
    for (const auto& f : j.at("futility")) s.futility.push_back(futility_from(f));
    if (!j.at("pk").is_null()) s.pk = pk_from(j.at("pk"));
    if (!j.at("obd").is_null()) s.obd = obd_from(j.at("obd"));
    s.empty_admissible_events = j.at("empty_admissible_events").get<int>();
    s.stop_reason = j.at("stop_reason").get<std::string>();
    return s;
  });
}

}  // namespace doseopt::io
