#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "doseopt/covariates.hpp"
#include "doseopt/design_engine.hpp"
#include "doseopt/rng.hpp"

namespace doseopt::sim {

struct PkTruth {
  double clearance_mean = 19.6;  // L/h, median of the lognormal clearance
  double omega = 0.308;          // sd of log clearance
  double tau_l = 46.31;          // AUC toxicity threshold, mg L / h
};

// Efficacy truth for the patterns matching every (characteristic, level) pair.
struct EfficacyRule {
  std::string label;
  std::map<std::string, std::string> when;
  std::vector<double> probs;  // per dose level
  std::optional<Level> obd;   // empty for a futile subgroup
};

struct Scenario {
  std::string name;
  std::string description;
  std::vector<double> grid_targets{0.05, 0.12, 0.25, 0.38};
  double grid_tau = 46.31;
  // Desired marginal toxicity per level; tau_l is shifted to match it in
  // probit least squares. Empty keeps pk.tau_l.
  std::vector<double> tox_truth;
  PkTruth pk;
  double accrual_rate = 0.5;  // patients per week
  double tox_window = 4.0;
  double eff_window = 8.0;
  bsgs::CovariateSchema schema;
  std::vector<EfficacyRule> efficacy;  // first matching rule wins
  // Subgroups removed from the target population (oracle exclusions for the
  // naive comparator). Must coincide with the patterns whose rule has no OBD.
  std::vector<design::Exclusion> futile_subgroups;

  // Derived by finalize().
  std::vector<double> dosage;
  std::vector<double> true_tox;
  Level true_mtd = 0;
  std::vector<int> pattern_rule;  // rule index per full pattern

  void finalize(double p_target = 0.25);
  std::size_t num_levels() const { return dosage.size(); }
  const EfficacyRule& rule_for(std::size_t pattern) const { return efficacy[static_cast<std::size_t>(pattern_rule[pattern])]; }
  DoseGrid grid() const;
};

Scenario load_scenario(const std::string& path);
Scenario scenario_from_json(const std::string& text);
std::string scenario_to_json(const Scenario& scenario);

// D_j = exp(log CL + log tau + omega * Phi^-1(pi_j)).
std::vector<double> derive_dose_grid(const std::vector<double>& targets, const PkTruth& pk, double tau);
// Marginal toxicity P(D / CL > tau_l) at each dosage.
std::vector<double> marginal_toxicity(const std::vector<double>& dosage, const PkTruth& pk);
double fit_tau_l(const std::vector<double>& dosage, const std::vector<double>& tox, const PkTruth& pk);

std::vector<int> sample_patient(const bsgs::CovariateSchema& schema, Engine& rng);

struct ToxDraw {
  bool toxic;
  double auc;
};
ToxDraw simulate_toxicity(double dosage, const PkTruth& pk, Engine& rng);
bool simulate_efficacy(double prob, Engine& rng);
// Onset of an observed event, uniform over the window.
double event_time(double window, Engine& rng);
double interarrival(double rate, Engine& rng);

// Candidate patients with per-candidate keyed streams; every arm of a paired
// comparison sees the same candidates and latent outcomes.
class ScenarioSource : public design::PatientSource {
 public:
  ScenarioSource(const Scenario& scenario, std::uint64_t seed, std::uint64_t replicate);
  std::optional<design::Candidate> next() override;
  design::Outcomes outcomes(const design::Candidate& candidate, Level dose) override;

 private:
  struct Latent {
    double clearance;
    double u_eff;
    double tox_time;
    double eff_time;
  };
  const Scenario& scenario_;
  std::uint64_t seed_;
  std::uint64_t replicate_;
  std::uint64_t index_ = 0;
  double clock_ = 0.0;
  std::vector<Latent> latent_;
  std::vector<std::vector<int>> levels_;
};

enum class Design { Optimal, Naive, NoPk };
const char* to_string(Design design);
Design design_from_string(const std::string& name);

design::DesignConfig make_config(Design design, int n_max, const Scenario& scenario);

struct TrialResult {
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;
  design::TrialState state;
};

enum class RunMode { Full, EscalationOnly };

TrialResult run_trial(const Scenario& scenario, const design::DesignConfig& config, std::uint64_t seed,
                      std::uint64_t replicate, RunMode mode = RunMode::Full, bool oracle_exclusions = false);

// Per-trial operating characteristics.
enum class Identification { Correct, Incorrect, EarlyStop };

struct TrialSummary {
  Identification identification = Identification::Incorrect;
  int identified_at = 0;  // assessment (1-3) where the target population first matched; 0 if never or trivially
  bool incorrect_subgroup = false;
  bool partial = false;
  std::vector<double> pcs;                       // per true subgroup
  std::vector<std::vector<double>> recommended;  // per subgroup, share of the subgroup recommended each level
  std::optional<double> tpr;
  std::optional<double> fpr;
  std::vector<int> allocation;
  std::optional<Level> mtd_star;
  std::optional<Level> mtd_tox;
  int n_patients = 0;
};

struct Subgroup {
  std::string name;
  Level obd = 0;
  std::vector<std::size_t> patterns;
  std::vector<double> weights;  // prevalence within the subgroup
};

// True subgroups of the target population, grouped by true OBD.
std::vector<Subgroup> true_subgroups(const Scenario& scenario);
std::vector<bool> true_futile_patterns(const Scenario& scenario);
// Indicators whose level changes the true OBD within the target population.
bsgs::IndicatorMask influential_indicators(const Scenario& scenario, const bsgs::CovariateSchema& schema);

TrialSummary summarize(const Scenario& scenario, const bsgs::CovariateSchema& schema, const design::TrialState& state);

struct StudyMetrics {
  std::string scenario;
  std::string design;
  int n_max = 0;
  int reps = 0;
  // target population identification
  double correct = 0.0;
  std::vector<double> correct_by_assessment{0.0, 0.0, 0.0};
  double incorrect = 0.0;
  double incorrect_subgroup = 0.0;
  std::optional<double> partial;
  double early_stop = 0.0;
  // variable selection, percent
  std::optional<double> tpr;
  std::optional<double> fpr;
  std::vector<std::string> subgroup_names;
  std::vector<Level> subgroup_obd;
  std::vector<double> pcs;
  std::vector<std::vector<double>> recommended;
  std::vector<double> allocation;  // mean patients per level
  // acceptable set at the end of escalation, versus the true MTD
  double set_correct = 0.0;
  double set_overdose = 0.0;
  double set_missed = 0.0;
  double mean_patients = 0.0;
};

StudyMetrics aggregate(const Scenario& scenario, Design design, int n_max, const std::vector<TrialSummary>& trials);

struct StudyOptions {
  Design design = Design::Optimal;
  int n_max = 60;
  int reps = 500;
  std::uint64_t seed = 20240601;
  int threads = 1;
  RunMode mode = RunMode::Full;
  std::optional<std::string> reference;  // "characteristic=level"
};

struct StudyResult {
  StudyMetrics metrics;
  std::vector<TrialResult> trials;
  std::vector<TrialSummary> summaries;
};

StudyResult run_study(const Scenario& scenario, const StudyOptions& options);

// Schema with an overridden reference level, "characteristic=level".
bsgs::CovariateSchema apply_reference(const bsgs::CovariateSchema& schema, const std::string& spec);

std::string metrics_to_json(const StudyMetrics& m);
std::string pcs_csv(const StudyMetrics& m);
std::string futility_csv(const std::vector<TrialResult>& trials, const bsgs::CovariateSchema& schema);
std::string allocation_csv(const StudyMetrics& m);
std::string trace_json(const Scenario& scenario, Design design, const design::DesignConfig& config,
                       const bsgs::CovariateSchema& schema, const TrialResult& trial);

// Writes metrics.json, pcs.csv, futility.csv, allocation.csv, scenario.json
// and, when traces is set, traces/rep_NNNN.json.
void write_outputs(const std::string& dir, const Scenario& scenario, const StudyOptions& options,
                   const StudyResult& result, bool traces);

// Recomputes metrics from a directory written with traces.
StudyMetrics metrics_from_traces(const std::string& dir);

}  // namespace doseopt::sim
