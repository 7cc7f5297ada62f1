#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "doseopt/error.hpp"
#include "doseopt/serialization.hpp"
#include "doseopt/sim_harness.hpp"
#include "doseopt/trial_service.hpp"

using namespace doseopt;

namespace {

doseopt::service::HttpServer* g_server = nullptr;

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

int simulate(const std::string& scenario_file, const std::string& design, int reps, int nmax, std::uint64_t seed,
             const std::string& out, bool traces, const std::string& reference, int threads, bool escalation_only) {
  auto scenario = sim::load_scenario(scenario_file);
  sim::StudyOptions o;
  o.design = sim::design_from_string(design);
  o.reps = reps;
  o.n_max = nmax;
  o.seed = seed;
  o.threads = threads;
  o.mode = escalation_only ? sim::RunMode::EscalationOnly : sim::RunMode::Full;
  if (!reference.empty()) o.reference = reference;
  auto result = sim::run_study(scenario, o);
  sim::write_outputs(out, scenario, o, result, traces);
  std::cout << sim::metrics_to_json(result.metrics) << "\n";
  return 0;
}

int grid(const std::vector<double>& targets, const std::vector<double>& pk_args) {
  sim::PkTruth pk;
  if (!pk_args.empty()) {
    pk.clearance_mean = pk_args[0];
    pk.omega = pk_args[1];
    pk.tau_l = pk_args[2];
  }
  auto dosage = sim::derive_dose_grid(targets, pk, pk.tau_l);
  io::Json j = {{"dosage", dosage},
                {"skeleton", targets},
                {"toxicity", sim::marginal_toxicity(dosage, pk)},
                {"pk", {{"clearance_mean", pk.clearance_mean}, {"omega", pk.omega}, {"tau_l", pk.tau_l}}}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int metrics(const std::string& dir, const std::string& out) {
  auto m = sim::metrics_from_traces(dir);
  const auto text = sim::metrics_to_json(m);
  if (!out.empty()) {
    std::ofstream f(out);
    f << text << "\n";
  }
  std::cout << text << "\n";
  return 0;
}

int serve(const std::string& data_dir, const std::string& bind, int workers) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw InputError("bind address must be host:port", {"bind"});
  const auto host = bind.substr(0, colon);
  const int port = std::stoi(bind.substr(colon + 1));
  std::optional<std::string> token;
  if (const char* t = std::getenv("DOSEOPT_TOKEN"); t && *t) token = t;

  service::TrialService svc(data_dir, workers);
  service::HttpServer http(svc, token);
  const int bound = http.bind(host, port);
  if (bound < 0) {
    std::cerr << "cannot bind " << bind << "\n";
    return 1;
  }
  g_server = &http;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cerr << "listening on " << host << ":" << bound << " data " << data_dir << "\n";
  http.serve();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dose optimization trial design: simulation and trial service"};
  app.require_subcommand(1);

  auto* sim_cmd = app.add_subcommand("simulate", "Run a replicated simulation study");
  std::string scenario, design = "optimal", out, reference;
  int reps = 500, nmax = 60, threads = 1;
  std::uint64_t seed = 20240601;
  bool traces = false, escalation_only = false;
  sim_cmd->add_option("--scenario", scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--design", design, "optimal, naive or nopk")
      ->check(CLI::IsMember({"optimal", "naive", "nopk"}));
  sim_cmd->add_option("--reps", reps, "Replicates")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--nmax", nmax, "Maximum sample size")->check(CLI::IsMember({60, 80}));
  sim_cmd->add_option("--seed", seed, "Study seed");
  sim_cmd->add_option("--out", out, "Output directory")->required();
  sim_cmd->add_flag("--traces", traces, "Write per-replicate trace files");
  sim_cmd->add_option("--reference", reference, "Override a reference level, characteristic=level");
  sim_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  sim_cmd->add_flag("--escalation-only", escalation_only, "Stop each replicate after the acceptable set is fixed");

  auto* grid_cmd = app.add_subcommand("grid", "Derive dosages from target toxicity probabilities");
  std::vector<double> targets{0.05, 0.12, 0.25, 0.38}, pk_args;
  grid_cmd->add_option("--targets", targets, "Target toxicity per level")->delimiter(',');
  grid_cmd->add_option("--pk", pk_args, "Mean clearance, omega, threshold")->delimiter(',')->expected(3);

  auto* met_cmd = app.add_subcommand("metrics", "Recompute metrics from trace files");
  std::string trace_dir, met_out;
  met_cmd->add_option("--trace-dir", trace_dir, "Directory written by simulate --traces")
      ->required()
      ->check(CLI::ExistingDirectory);
  met_cmd->add_option("--out", met_out, "Also write metrics to this file");

  auto* srv_cmd = app.add_subcommand("serve", "Run the trial service");
  std::string data_dir = env_or("DOSEOPT_DATA_DIR", "./doseopt-data");
  std::string bind = env_or("DOSEOPT_BIND_ADDR", "127.0.0.1:8080");
  int workers = std::stoi(env_or("DOSEOPT_WORKERS", "2"));
  srv_cmd->add_option("--data-dir", data_dir, "State directory");
  srv_cmd->add_option("--bind", bind, "host:port");
  srv_cmd->add_option("--workers", workers, "Model-fitting workers")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim_cmd) return simulate(scenario, design, reps, nmax, seed, out, traces, reference, threads, escalation_only);
    if (*grid_cmd) return grid(targets, pk_args);
    if (*met_cmd) return metrics(trace_dir, met_out);
    if (*srv_cmd) return serve(data_dir, bind, workers);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
