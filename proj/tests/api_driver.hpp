#pragma once

// Drives a trial through the HTTP API with the same patient stream and the
// same event ordering as design::run_to_completion.

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>

#include "doseopt/serialization.hpp"
#include "doseopt/sim_harness.hpp"

namespace api_driver {

using doseopt::io::Json;

struct Reply {
  int status = 0;
  Json body;
};

inline Reply post(httplib::Client& c, const std::string& path, const Json& body, const httplib::Headers& h = {}) {
  auto r = c.Post(path, h, body.dump(), "application/json");
  if (!r) throw std::runtime_error("no response from POST " + path);
  return {r->status, r->body.empty() ? Json() : Json::parse(r->body)};
}

inline Reply get(httplib::Client& c, const std::string& path) {
  auto r = c.Get(path);
  if (!r) throw std::runtime_error("no response from GET " + path);
  return {r->status, r->body.empty() ? Json() : Json::parse(r->body)};
}

inline Json covariates(const doseopt::bsgs::CovariateSchema& s, const std::vector<int>& levels) {
  Json j = Json::object();
  for (std::size_t h = 0; h < levels.size(); ++h)
    j[s.characteristics()[h].name] = s.characteristics()[h].levels[static_cast<std::size_t>(levels[h])];
  return j;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Run {
  std::string trial_id;
  Json final_state;        // from GET /state
  Json first_exclusion;    // first excluded_subgroup rejection, null if none
  int enrolled = 0;
};

// on_enrolled(count) is called after each patient's outcomes are recorded.
inline Run drive(httplib::Client& c, const doseopt::sim::Scenario& scenario, const doseopt::design::DesignConfig& config,
                 std::uint64_t seed, const std::function<void(const std::string&, int)>& on_enrolled = {}) {
  auto expect = [](const Reply& r, int status, const char* what) {
    if (r.status != status)
      throw std::runtime_error(std::string(what) + " returned " + std::to_string(r.status) + ": " + r.body.dump());
  };
  Run run;
  auto created = post(c, "/v1/trials",
                      {{"config", doseopt::io::to_json(config)},
                       {"grid", doseopt::io::to_json(scenario.grid())},
                       {"schema", doseopt::io::to_json(scenario.schema)},
                       {"seed", seed}});
  expect(created, 201, "create");
  run.trial_id = created.body.at("trial_id").get<std::string>();
  const auto base = "/v1/trials/" + run.trial_id;
  doseopt::sim::ScenarioSource source(scenario, seed, 0);

  Json status = get(c, base + "/report").body;
  auto finished = [&] {
    const auto st = status.at("stage").get<std::string>();
    return st == "complete" || st == "terminated_futile";
  };
  auto clock = [&](double t) {
    auto r = post(c, base + "/clock", {{"time", t}});
    expect(r, 200, "clock");
    status = r.body;
  };
  while (!finished()) {
    if (status.at("stage") == "final_analysis") {
      clock(std::max(status.at("now").get<double>(), status.at("ready_time").get<double>()));
      continue;
    }
    auto cand = source.next();
    if (!cand) throw std::runtime_error("patient stream exhausted");
    double t = std::max(cand->arrival, status.at("now").get<double>());
    if (status.at("stage") == "pk_adjust") t = std::max(t, status.at("ready_time").get<double>());
    if (status.at("stage") != "escalation") {
      clock(t);
      if (finished()) break;
    }
    auto e = post(c, base + "/patients", {{"covariates", covariates(scenario.schema, cand->levels)}, {"time", t}});
    if (e.status == 409 && e.body.at("code") == "excluded_subgroup") {
      if (run.first_exclusion.is_null()) run.first_exclusion = e.body;
      continue;
    }
    expect(e, 201, "enroll");
    const int pid = e.body.at("patient");
    const auto o = source.outcomes(*cand, e.body.at("level").get<int>() - 1);
    auto r = post(c, base + "/patients/" + std::to_string(pid) + "/outcomes",
                  {{"toxicity", {{"event", o.toxic}, {"event_time", o.toxic ? o.tox_time : config.tox_window}}},
                   {"efficacy", {{"event", o.responded}, {"event_time", o.responded ? o.eff_time : config.eff_window}}},
                   {"auc", o.auc}});
    expect(r, 200, "outcome");
    status = r.body;
    ++run.enrolled;
    if (on_enrolled) on_enrolled(run.trial_id, run.enrolled);
  }
  auto st = get(c, base + "/state");
  expect(st, 200, "state");
  run.final_state = st.body.at("state");
  return run;
}

}  // namespace api_driver
