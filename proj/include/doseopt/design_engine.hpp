#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "doseopt/covariates.hpp"
#include "doseopt/dose_grid.hpp"
#include "doseopt/efficacy_bsgs.hpp"
#include "doseopt/pk_model.hpp"
#include "doseopt/rng.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace doseopt::design {

enum class Stage {
  Escalation,
  PkAdjust,
  Futility1,
  AdaptiveRandomization,
  Futility2,
  Optimization,
  FinalAnalysis,
  TerminatedFutile,
  Complete,
};

const char* to_string(Stage stage);
Stage stage_from_string(const std::string& name);

struct DesignConfig {
  int n1 = 24;
  int n2 = 36;
  double r = 0.5;
  double p_target = 0.25;
  double psi_e = 0.50;
  double psi_f = 0.65;
  double psi_obd = 0.35;
  double c_f = 0.40;
  double lambda = 0.05;
  double delta = 0.05;
  double kappa = 0.20;
  int s_min = 3;
  double epsilon = 0.85;
  double alpha_base = 0.40;
  double alpha_decay = 0.5;
  int futility_min_1 = 6;   // treated at MTD*
  int futility_min_2 = 10;  // treated across the acceptable set
  bool pk_enabled = true;
  bool heterogeneity_enabled = true;
  // Escalation decisions treat every enrolled patient as fully observed.
  bool escalation_full_observation = false;
  int cohort_size = 1;
  double tox_window = 4.0;  // weeks
  double eff_window = 8.0;
  double tox_prior_sd = 1.1575836902790226;  // sqrt(1.34)
  double pk_threshold = 46.31;               // AUC scale
  double pk_mean_clearance = 19.6;
  int min_conditional_draws = 50;
  bsgs::SamplerConfig mcmc;
  pk::PkSamplerConfig pk_mcmc;

  int n_max() const { return n1 + n2; }
  int n_randomization() const;
  // Closeness margin for the optimization rule after n dose-ranging assignments.
  double alpha(int n) const;

  // Throws InputError listing every offending field.
  void validate() const;
};

// Subgroup removed from enrollment: the listed levels of one characteristic.
struct Exclusion {
  std::size_t characteristic = 0;
  std::vector<int> levels;
  int assessment = 0;  // 1 or 2; 0 for exclusions imposed from outside the design

  bool operator==(const Exclusion&) const = default;
};

struct PatientRecord {
  int id = 0;
  double arrival = 0.0;  // weeks since the trial opened
  std::vector<int> levels;
  bsgs::IndicatorMask z = 0;
  Level dose = 0;
  Stage stage = Stage::Escalation;
  // Outcomes are stored with onset times relative to arrival. Views of the
  // data are censored at the trial clock, so outcomes may be recorded early.
  std::optional<bool> toxic;
  double tox_time = 0.0;
  std::optional<bool> responded;
  double eff_time = 0.0;
  std::optional<double> auc;

  bool operator==(const PatientRecord&) const = default;
};

struct DoseDecision {
  int patient = 0;
  Stage stage = Stage::Escalation;
  double time = 0.0;
  Level dose = 0;
  std::vector<double> tox_probs;      // escalation: CRM estimate used
  std::vector<double> eff_estimates;  // dose ranging: per acceptable level
  std::vector<Level> admissible;
  std::vector<double> inclusion;
  bsgs::IndicatorMask selected = 0;
  bool empty_admissible = false;
  bool conditioning_fallback = false;

  bool operator==(const DoseDecision&) const = default;
};

struct SubgroupTest {
  int value = 0;  // 1: patients at the influential level; 0: the rest
  double prob_exceed = 0.0;
  int n_treated = 0;
  bool criterion_met = false;
  bool eliminated = false;

  bool operator==(const SubgroupTest&) const = default;
};

struct FutilityOutcome {
  int assessment = 0;
  double time = 0.0;
  std::vector<double> inclusion;
  std::optional<int> influential;  // indicator index
  std::vector<SubgroupTest> subgroups;
  bool trial_stop = false;
  bool conditioning_fallback = false;

  bool operator==(const FutilityOutcome&) const = default;
};

struct PkAdjustment {
  double time = 0.0;
  double tox_mean_a = 0.0;
  std::vector<double> scaled;  // skeleton^exp(a) after escalation
  Level mtd_tox = 0;
  std::optional<Level> mtd_pk;
  std::vector<double> pk_exceed;
  Level mtd_star = 0;
  std::vector<Level> acceptable_tox;  // before the PK adjustment

  bool operator==(const PkAdjustment&) const = default;
};

struct ObdEntry {
  bsgs::IndicatorMask z = 0;  // values of the selected indicators
  std::string label;
  std::optional<Level> obd;   // empty when the pattern is futile
  std::vector<double> mean_eff;
  std::vector<double> prob_near_max;
  double prob_exceed_cf = 0.0;
  bool futile = false;
  bool excluded = false;  // pattern belongs to an eliminated subgroup
  bool conditioning_fallback = false;

  bool operator==(const ObdEntry&) const = default;
};

struct ObdReport {
  double time = 0.0;
  std::vector<double> tox_probs;
  Level mtd = 0;
  std::vector<Level> acceptable;
  std::vector<double> inclusion;
  bsgs::IndicatorMask active = 0;
  bsgs::IndicatorMask selected = 0;
  std::vector<ObdEntry> entries;

  bool operator==(const ObdReport&) const = default;
};

struct TrialState {
  static constexpr int kSchemaVersion = 1;

  Stage stage = Stage::Escalation;
  double now = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;
  std::vector<PatientRecord> patients;
  std::vector<Level> acceptable;
  std::vector<Exclusion> exclusions;
  std::vector<DoseDecision> decisions;
  std::vector<FutilityOutcome> futility;
  std::optional<PkAdjustment> pk;
  std::optional<ObdReport> obd;
  int empty_admissible_events = 0;
  std::string stop_reason;

  bool operator==(const TrialState&) const = default;
};

struct Assignment {
  int patient = 0;
  Level dose = 0;
  Stage stage = Stage::Escalation;
};

// Members of the eliminated subgroups, given one level per characteristic.
bool is_excluded(std::span<const Exclusion> exclusions, std::span<const int> levels);
std::optional<int> excluding_assessment(std::span<const Exclusion> exclusions, std::span<const int> levels);

// {j in acceptable : estimate_j >= kappa or fewer than s_min treated at j}.
// `estimates` and `treated` are indexed by dose level.
std::vector<Level> admissible_set(std::span<const Level> acceptable, std::span<const double> estimates,
                                  std::span<const int> treated, double kappa, int s_min);

// Draws levels[i] with probability proportional to weights[i]; uniform when all are zero.
Level randomize_dose(std::span<const Level> levels, std::span<const double> weights, Engine& rng);
std::vector<double> randomization_probs(std::span<const double> weights);

// Lowest of `levels` whose estimate (aligned with levels) is within alpha of their maximum.
Level optimization_dose(std::span<const Level> levels, std::span<const double> estimates, double alpha);

// The trial state machine. One writer at a time; every mutation advances
// the clock monotonically and runs any stage transition that has come due.
class Trial {
 public:
  Trial(DesignConfig config, DoseGrid grid, bsgs::CovariateSchema schema, std::uint64_t seed,
        std::uint64_t replicate = 0);
  // Resume from a persisted state.
  Trial(DesignConfig config, DoseGrid grid, bsgs::CovariateSchema schema, TrialState state);

  const DesignConfig& config() const { return config_; }
  const DoseGrid& grid() const { return grid_; }
  const bsgs::CovariateSchema& schema() const { return schema_; }
  const TrialState& state() const { return state_; }
  Stage stage() const { return state_.stage; }
  bool finished() const { return state_.stage == Stage::Complete || state_.stage == Stage::TerminatedFutile; }

  // Time at which a paused stage (PkAdjust, FinalAnalysis) resumes.
  std::optional<double> ready_time() const;
  bool accepting(double now) const;
  bool excluded(std::span<const int> levels) const;

  // Moves the clock forward and runs due transitions.
  void advance(double now);

  // Assigns a dose to a new patient arriving at `now`.
  Assignment enroll(std::span<const int> levels, double now);

  // event_time is weeks after arrival; for a negative outcome it is the
  // follow-up at which the window closed and is ignored by the models.
  void record_toxicity(int patient, bool toxic, double event_time);
  void record_efficacy(int patient, bool responded, double event_time);
  void record_auc(int patient, double auc);

  // Removes a subgroup from future enrollment outside the futility procedure.
  void impose_exclusion(Exclusion exclusion);

  // Data views censored at the clock.
  std::vector<crm::ToxObservation> tox_data(bool full_observation) const;
  std::vector<bsgs::EffObservation> eff_data(bool full_observation) const;
  std::vector<int> treated_counts() const;
  // Indicators that may enter the efficacy model given the exclusions and the data.
  bsgs::IndicatorMask active_indicators() const;
  std::vector<double> scaled_doses() const;

  FutilityOutcome futility_assessment(int assessment);

 private:
  void run_pk_adjustment();
  void run_futility(int assessment, Stage next);
  void run_final_analysis();
  Assignment assign_escalation(PatientRecord& rec);
  Assignment assign_dose_ranging(PatientRecord& rec);
  PatientRecord& patient(int id);
  bsgs::EffPosterior fit_efficacy(Stream purpose, std::uint64_t index, bool full_observation,
                                  std::span<const double> scaled) const;

  DesignConfig config_;
  DoseGrid grid_;
  bsgs::CovariateSchema schema_;
  TrialState state_;
};

// Final OBD selection on a fitted posterior. `acceptable` is the refitted
// acceptable set and `scaled` the per-level scaled doses.
ObdReport final_analysis(const bsgs::EffPosterior& post, const bsgs::CovariateSchema& schema,
                         std::span<const Exclusion> exclusions, std::span<const Level> acceptable,
                         std::span<const double> scaled, const DesignConfig& config);

// OBD recommended for a full covariate pattern; empty when the pattern was
// eliminated, judged futile, or the trial has no final report.
std::optional<Level> recommended_obd(const TrialState& state, const bsgs::CovariateSchema& schema,
                                     std::span<const int> levels);
const ObdEntry* obd_entry(const ObdReport& report, const bsgs::CovariateSchema& schema,
                          std::span<const int> levels);

// Acceptable set after escalation, shrunk by the exposure model when enabled.
std::vector<Level> apply_pk_adjustment(Level mtd_tox, std::optional<Level> mtd_pk, std::size_t num_levels);

// Patient stream consumed by the drivers below.
struct Candidate {
  double arrival = 0.0;
  std::vector<int> levels;
};

struct Outcomes {
  bool toxic = false;
  double tox_time = 0.0;
  bool responded = false;
  double eff_time = 0.0;
  double auc = 0.0;
};

class PatientSource {
 public:
  virtual ~PatientSource() = default;
  // Next arriving candidate; nullopt when the source is exhausted.
  virtual std::optional<Candidate> next() = 0;
  virtual Outcomes outcomes(const Candidate& candidate, Level dose) = 0;
};

// Enrolls candidates until the escalation cohort is full; the trial is left
// paused in PkAdjust. Throws StateError when the source runs dry first.
void run_escalation(Trial& trial, PatientSource& source);

// Runs the trial to Complete or TerminatedFutile. Candidates from eliminated
// subgroups are skipped; arrivals during a pause wait for it to end.
void run_to_completion(Trial& trial, PatientSource& source);

}  // namespace doseopt::design
