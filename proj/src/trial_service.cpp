#include "doseopt/trial_service.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

#include <httplib.h>

#include "doseopt/error.hpp"
#include "doseopt/sim_harness.hpp"
#include "doseopt/toxicity_crm.hpp"

namespace doseopt::service {

namespace fs = std::filesystem;
using design::Stage;

namespace {

std::string now_iso() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string random_hex(int bytes) {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard lock(mu);
  std::string out;
  char buf[3];
  for (int i = 0; i < bytes; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", static_cast<unsigned>(rd() & 0xffu));
    out += buf;
  }
  return out;
}

bool valid_id(const std::string& id) {
  return !id.empty() && id.size() <= 64 &&
         std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const fs::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

Json audit_json(const AuditEntry& a) {
  return {{"seq", a.seq},
          {"timestamp", a.timestamp},
          {"actor", a.actor},
          {"action", a.action},
          {"payload_digest", a.payload_digest},
          {"chain_digest", a.chain_digest}};
}

AuditEntry audit_from(const Json& j) {
  AuditEntry a;
  a.seq = j.at("seq").get<std::int64_t>();
  a.timestamp = j.at("timestamp").get<std::string>();
  a.actor = j.at("actor").get<std::string>();
  a.action = j.at("action").get<std::string>();
  a.payload_digest = j.at("payload_digest").get<std::string>();
  a.chain_digest = j.at("chain_digest").get<std::string>();
  return a;
}

AuditEntry make_audit(const std::vector<AuditEntry>& log, const std::string& actor, const std::string& action,
                      const Json& payload) {
  AuditEntry a;
  a.seq = static_cast<std::int64_t>(log.size()) + 1;
  a.timestamp = now_iso();
  a.actor = actor;
  a.action = action;
  a.payload_digest = sha256_hex(payload.dump());
  const std::string prev = log.empty() ? std::string(64, '0') : log.back().chain_digest;
  a.chain_digest = sha256_hex(prev + "|" + std::to_string(a.seq) + "|" + a.timestamp + "|" + actor + "|" + action +
                              "|" + a.payload_digest);
  return a;
}

Response map_exception(std::exception_ptr ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const ExcludedSubgroupError& e) {
    auto r = error_response(409, "excluded_subgroup", e.what(), {"covariates"});
    r.body["assessment"] = e.assessment();
    return r;
  } catch (const InputError& e) {
    return error_response(422, "invalid_input", e.what(), e.field_paths());
  } catch (const NotFoundError& e) {
    return error_response(404, "not_found", e.what());
  } catch (const StateError& e) {
    return error_response(409, "conflict", e.what());
  } catch (const NumericalError& e) {
    return error_response(500, "numerical_failure", e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(422, "invalid_input", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

int level_out(Level l) { return l + 1; }

Json levels_out(std::span<const Level> v) {
  Json a = Json::array();
  for (auto l : v) a.push_back(level_out(l));
  return a;
}

double required_time(const Json& payload) {
  if (!payload.contains("time") || !payload.at("time").is_number())
    throw InputError("time (weeks since the trial opened) is required", {"time"});
  return payload.at("time").get<double>();
}

std::vector<int> covariate_levels(const bsgs::CovariateSchema& schema, const Json& payload) {
  if (!payload.contains("covariates") || !payload.at("covariates").is_object())
    throw InputError("covariates must be an object of characteristic: level", {"covariates"});
  const auto& cov = payload.at("covariates");
  std::vector<int> levels(schema.num_characteristics(), -1);
  std::vector<std::string> bad;
  for (auto it = cov.begin(); it != cov.end(); ++it) {
    const auto& chars = schema.characteristics();
    auto pos = std::find_if(chars.begin(), chars.end(), [&](const auto& c) { return c.name == it.key(); });
    if (pos == chars.end() || !it.value().is_string()) {
      bad.push_back("covariates/" + it.key());
      continue;
    }
    auto h = static_cast<std::size_t>(pos - chars.begin());
    const auto& names = chars[h].levels;
    auto l = std::find(names.begin(), names.end(), it.value().get<std::string>());
    if (l == names.end()) bad.push_back("covariates/" + it.key());
    else levels[h] = static_cast<int>(l - names.begin());
  }
  for (std::size_t h = 0; h < levels.size(); ++h)
    if (levels[h] < 0 && std::find(bad.begin(), bad.end(), "covariates/" + schema.characteristics()[h].name) == bad.end())
      bad.push_back("covariates/" + schema.characteristics()[h].name);
  if (!bad.empty()) throw InputError("unknown or missing covariates", bad);
  return levels;
}

Json stage_info(const design::Trial& t) {
  const auto& s = t.state();
  Json j = {{"stage", design::to_string(s.stage)}, {"now", s.now}, {"acceptable", levels_out(s.acceptable)}};
  if (auto r = t.ready_time()) j["ready_time"] = *r;
  if (s.pk)
    j["pk"] = {{"mtd_tox", level_out(s.pk->mtd_tox)},
               {"mtd_pk", s.pk->mtd_pk ? Json(level_out(*s.pk->mtd_pk)) : Json(nullptr)},
               {"mtd_star", level_out(s.pk->mtd_star)}};
  if (!s.stop_reason.empty()) j["stop_reason"] = s.stop_reason;
  for (const auto& f : s.futility)
    if (f.trial_stop) j["stop_assessment"] = f.assessment;
  if (s.obd) j["obd_available"] = true;
  return j;
}

void record_one(design::Trial& t, int patient, const Json& o, bool tox) {
  if (!o.is_object() || !o.contains("event") || !o.at("event").is_boolean())
    throw InputError("outcome needs a boolean 'event'", {tox ? "toxicity/event" : "efficacy/event"});
  const bool event = o.at("event").get<bool>();
  const double window = tox ? t.config().tox_window : t.config().eff_window;
  double when = window;
  if (o.contains("event_time")) {
    if (!o.at("event_time").is_number())
      throw InputError("event_time must be a number", {tox ? "toxicity/event_time" : "efficacy/event_time"});
    when = o.at("event_time").get<double>();
  } else if (event) {
    throw InputError("event_time is required for an observed event", {tox ? "toxicity/event_time" : "efficacy/event_time"});
  }
  try {
    if (tox) t.record_toxicity(patient, event, when);
    else t.record_efficacy(patient, event, when);
  } catch (const InputError& e) {
    throw InputError(e.what(), {tox ? "toxicity/event_time" : "efficacy/event_time"});
  }
}

}  // namespace

Response error_response(int status, const std::string& code, const std::string& message,
                        std::vector<std::string> field_paths) {
  return {status, Json{{"code", code}, {"message", message}, {"field_paths", field_paths}}};
}

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  std::string out;
  char buf[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

Json to_json(const TrialDocument& d) {
  Json audit = Json::array();
  for (const auto& a : d.audit_log) audit.push_back(audit_json(a));
  return {{"schema_version", design::TrialState::kSchemaVersion},
          {"trial_id", d.trial_id},
          {"version", d.version},
          {"config", io::to_json(d.config)},
          {"grid", io::to_json(d.grid)},
          {"schema", io::to_json(d.schema)},
          {"state", io::to_json(d.state)},
          {"audit_log", audit}};
}

TrialDocument document_from_json(const Json& j) {
  TrialDocument d;
  d.trial_id = j.at("trial_id").get<std::string>();
  d.version = j.at("version").get<std::int64_t>();
  d.config = io::config_from_json(j.at("config"));
  d.grid = io::grid_from_json(j.at("grid"));
  d.schema = io::schema_from_json(j.at("schema"));
  d.state = io::state_from_json(j.at("state"));
  for (const auto& a : j.at("audit_log")) d.audit_log.push_back(audit_from(a));
  return d;
}

// ---------------------------------------------------------------------------

FileStore::FileStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "trials");
  fs::create_directories(root_ / "idempotency");
}

fs::path FileStore::dir(const std::string& id) const {
  if (!valid_id(id)) throw NotFoundError("unknown trial '" + id + "'");
  return root_ / "trials" / id;
}

bool FileStore::exists(const std::string& id) const {
  return valid_id(id) && (fs::exists(dir(id) / "document.json") || fs::exists(dir(id) / "journal.jsonl"));
}

std::optional<TrialDocument> FileStore::load(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto p = dir(id) / "document.json";
  if (!fs::exists(p)) return std::nullopt;
  return document_from_json(Json::parse(read_file(p)));
}

void FileStore::save(const TrialDocument& doc, std::int64_t expected_version) {
  std::lock_guard lock(mu_);
  auto d = dir(doc.trial_id);
  fs::create_directories(d);
  auto p = d / "document.json";
  std::int64_t stored = 0;
  if (fs::exists(p)) stored = Json::parse(read_file(p)).at("version").get<std::int64_t>();
  if (stored != expected_version)
    throw StateError("version conflict: stored " + std::to_string(stored) + ", expected " +
                     std::to_string(expected_version));
  write_atomic(p, to_json(doc).dump());
}

void FileStore::append_journal(const std::string& id, const Json& entry) {
  std::lock_guard lock(mu_);
  auto d = dir(id);
  fs::create_directories(d);
  std::ofstream out(d / "journal.jsonl", std::ios::binary | std::ios::app);
  out << entry.dump() << "\n";
  out.flush();
  if (!out) throw std::runtime_error("cannot append to the journal of " + id);
}

std::vector<Json> FileStore::journal(const std::string& id) const {
  std::lock_guard lock(mu_);
  std::vector<Json> out;
  std::ifstream in(dir(id) / "journal.jsonl", std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const nlohmann::json::exception&) {
      break;  // torn final line from an interrupted append
    }
  }
  return out;
}

std::optional<std::string> FileStore::idempotent_trial(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto p = root_ / "idempotency" / sha256_hex(key);
  if (!fs::exists(p)) return std::nullopt;
  return read_file(p);
}

void FileStore::remember_idempotent_trial(const std::string& key, const std::string& id) {
  std::lock_guard lock(mu_);
  write_atomic(root_ / "idempotency" / sha256_hex(key), id);
}

// ---------------------------------------------------------------------------

JobPool::JobPool(int workers) {
  for (int i = 0; i < std::max(1, workers); ++i) threads_.emplace_back([this] { run(); });
}

JobPool::~JobPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

std::string JobPool::submit(std::function<Response()> work) {
  std::lock_guard lock(mu_);
  char buf[32];
  std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(++counter_));
  std::string id = std::string(buf) + "-" + random_hex(4);
  auto job = std::make_shared<Job>();
  job->work = std::move(work);
  jobs_[id] = job;
  queue_.push_back(id);
  cv_.notify_one();
  return id;
}

void JobPool::run() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
      if (stop_ && queue_.empty()) return;
      job = jobs_.at(queue_.front());
      queue_.pop_front();
      job->running = true;
    }
    Response r;
    try {
      r = job->work();
    } catch (...) {
      r = map_exception(std::current_exception());
    }
    {
      std::lock_guard lock(mu_);
      job->result = std::move(r);
      job->done = true;
      job->running = false;
      job->work = nullptr;
    }
    done_cv_.notify_all();
  }
}

std::optional<Response> JobPool::wait(const std::string& id, int wait_ms) {
  std::unique_lock lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  auto job = it->second;
  done_cv_.wait_for(lock, std::chrono::milliseconds(std::max(0, wait_ms)), [&] { return job->done; });
  if (!job->done) return std::nullopt;
  return job->result;
}

std::optional<Json> JobPool::status(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  const auto& j = *it->second;
  Json out = {{"job", id}, {"status", j.done ? "done" : j.running ? "running" : "queued"}};
  if (j.done) out["result"] = {{"http_status", j.result.status}, {"body", j.result.body}};
  return out;
}

// ---------------------------------------------------------------------------

Json apply_action(design::Trial& t, const std::string& action, const Json& payload) {
  if (action == "enroll") {
    const auto levels = covariate_levels(t.schema(), payload);
    const double time = required_time(payload);
    const auto a = t.enroll(levels, time);
    Json out = {{"patient", a.patient},
                {"level", level_out(a.dose)},
                {"dosage", t.grid().dosage(a.dose)},
                {"assigned_stage", design::to_string(a.stage)}};
    const auto& d = t.state().decisions.back();
    Json why = {{"tox_probs", d.tox_probs}};
    if (a.stage != Stage::Escalation) {
      why["eff_estimates"] = d.eff_estimates;
      why["admissible"] = levels_out(d.admissible);
      why["empty_admissible"] = d.empty_admissible;
      why["conditioning_fallback"] = d.conditioning_fallback;
      Json sel = Json::array();
      for (std::size_t k = 0; k < t.schema().num_indicators(); ++k)
        if (d.selected >> k & 1u) sel.push_back(t.schema().indicators()[k].name);
      why["selected_covariates"] = sel;
    }
    out["rationale"] = why;
    out.update(stage_info(t));
    return out;
  }
  if (action == "outcome") {
    const int patient = payload.at("patient").get<int>();
    if (payload.contains("time")) t.advance(required_time(payload));
    bool any = false;
    if (payload.contains("toxicity")) {
      record_one(t, patient, payload.at("toxicity"), true);
      any = true;
    }
    if (payload.contains("efficacy")) {
      record_one(t, patient, payload.at("efficacy"), false);
      any = true;
    }
    if (payload.contains("auc")) {
      if (!payload.at("auc").is_number()) throw InputError("auc must be a number", {"auc"});
      try {
        t.record_auc(patient, payload.at("auc").get<double>());
      } catch (const InputError& e) {
        throw InputError(e.what(), {"auc"});
      }
      any = true;
    }
    if (!any) throw InputError("no outcome given", {"toxicity", "efficacy", "auc"});
    Json out = {{"patient", patient}};
    out.update(stage_info(t));
    return out;
  }
  if (action == "clock") {
    t.advance(required_time(payload));
    return stage_info(t);
  }
  throw InputError("unknown action '" + action + "'", {"action"});
}

TrialService::TrialService(fs::path data_dir, int workers) : store_(std::move(data_dir)), jobs_(workers) {}

std::shared_ptr<TrialService::Entry> TrialService::entry(const std::string& id) {
  std::lock_guard lock(mu_);
  auto& e = entries_[id];
  if (!e) e = std::make_shared<Entry>();
  return e;
}

design::TrialState TrialService::replay(const std::string& id) const {
  const auto journal = store_.journal(id);
  if (journal.empty() || journal.front().at("action") != "create") throw NotFoundError("no journal for trial '" + id + "'");
  const auto& c = journal.front().at("payload");
  design::Trial t(io::config_from_json(c.at("config")), io::grid_from_json(c.at("grid")),
                  io::schema_from_json(c.at("schema")), c.at("seed").get<std::uint64_t>());
  for (std::size_t i = 1; i < journal.size(); ++i)
    apply_action(t, journal[i].at("action").get<std::string>(), journal[i].at("payload"));
  return t.state();
}

void TrialService::ensure_loaded(const std::string& id, Entry& e) {
  if (e.doc) return;
  if (!store_.exists(id)) throw NotFoundError("unknown trial '" + id + "'");
  auto doc = store_.load(id);
  const auto journal = store_.journal(id);
  const auto logged = static_cast<std::int64_t>(journal.size());
  if (!journal.empty() && (!doc || doc->version < logged)) {
    // the document lags its journal: a write was interrupted, rebuild from the log
    const auto& c = journal.front().at("payload");
    TrialDocument rebuilt;
    rebuilt.trial_id = id;
    rebuilt.config = io::config_from_json(c.at("config"));
    rebuilt.grid = io::grid_from_json(c.at("grid"));
    rebuilt.schema = io::schema_from_json(c.at("schema"));
    rebuilt.state = replay(id);
    rebuilt.version = logged;
    for (const auto& j : journal) rebuilt.audit_log.push_back(audit_from(j.at("audit")));
    store_.save(rebuilt, doc ? doc->version : 0);
    doc = std::move(rebuilt);
  }
  if (!doc) throw NotFoundError("unknown trial '" + id + "'");
  e.doc = std::move(doc);
  publish(e);
}

void TrialService::publish(Entry& e) {
  auto snap = std::make_shared<const TrialDocument>(*e.doc);
  std::lock_guard lock(e.snap_mu);
  e.snap = std::move(snap);
}

std::shared_ptr<const TrialDocument> TrialService::snapshot(const std::string& id) {
  auto e = entry(id);
  {
    std::lock_guard lock(e->snap_mu);
    if (e->snap) return e->snap;
  }
  std::lock_guard lock(e->mu);
  ensure_loaded(id, *e);
  std::lock_guard snap_lock(e->snap_mu);
  return e->snap;
}

Response TrialService::run_job(std::function<Response()> work, const std::string& trial_id, int wait_ms) {
  const auto job = jobs_.submit(std::move(work));
  if (auto r = jobs_.wait(job, wait_ms)) return *r;
  return {202, Json{{"job", job}, {"status", "running"}, {"poll", "/v1/trials/" + trial_id + "/jobs/" + job}}};
}

Response TrialService::create_trial(const Json& body, const RequestContext& ctx) {
  try {
    if (!body.is_object()) throw InputError("body must be a JSON object");
    if (ctx.idempotency_key)
      if (auto id = store_.idempotent_trial(*ctx.idempotency_key)) {
        auto e = entry(*id);
        std::lock_guard lock(e->mu);
        ensure_loaded(*id, *e);
        return {200, Json{{"trial_id", *id}, {"version", e->doc->version}, {"stage", design::to_string(e->doc->state.stage)},
                          {"seed", e->doc->state.seed}, {"idempotent_replay", true}}};
      }

    design::DesignConfig config;
    if (body.contains("config")) {
      try {
        config = io::config_from_json(body.at("config"));
      } catch (const InputError& e) {
        std::vector<std::string> paths;
        for (const auto& p : e.field_paths()) paths.push_back("config/" + p);
        throw InputError(e.what(), paths);
      }
    }
    auto schema = body.contains("schema") ? io::schema_from_json(body.at("schema")) : bsgs::motivating_example_schema();
    std::optional<DoseGrid> grid;
    if (body.contains("grid")) grid = io::grid_from_json(body.at("grid"));
    else grid = DoseGrid(sim::derive_dose_grid(DoseGrid::default_skeleton(), sim::PkTruth{}, sim::PkTruth{}.tau_l),
                         DoseGrid::default_skeleton());
    std::uint64_t seed = 0;
    if (body.contains("seed")) {
      if (!body.at("seed").is_number_unsigned()) throw InputError("seed must be a non-negative integer", {"seed"});
      seed = body.at("seed").get<std::uint64_t>();
    } else {
      seed = std::stoull(random_hex(8), nullptr, 16);
    }
    design::Trial trial(config, *grid, schema, seed);

    std::string id;
    if (body.contains("trial_id")) {
      id = body.at("trial_id").get<std::string>();
      if (!valid_id(id)) throw InputError("trial_id may hold letters, digits, '-' and '_'", {"trial_id"});
      if (store_.exists(id)) throw StateError("trial '" + id + "' already exists");
    } else {
      id = "t-" + random_hex(8);
    }

    const Json payload = {{"config", io::to_json(config)},
                          {"grid", io::to_json(*grid)},
                          {"schema", io::to_json(schema)},
                          {"seed", seed}};
    TrialDocument doc;
    doc.trial_id = id;
    doc.version = 1;
    doc.config = config;
    doc.grid = *grid;
    doc.schema = schema;
    doc.state = trial.state();
    doc.audit_log.push_back(make_audit({}, ctx.actor, "create", payload));
    Response r{201, Json{{"trial_id", id}, {"version", 1}, {"stage", design::to_string(doc.state.stage)}, {"seed", seed}}};

    auto e = entry(id);
    std::lock_guard lock(e->mu);
    store_.append_journal(id, {{"seq", 1},
                               {"action", "create"},
                               {"payload", payload},
                               {"idempotency_key", ctx.idempotency_key ? Json(*ctx.idempotency_key) : Json(nullptr)},
                               {"audit", audit_json(doc.audit_log.back())},
                               {"response", {{"status", r.status}, {"body", r.body}}}});
    store_.save(doc, 0);
    if (ctx.idempotency_key) store_.remember_idempotent_trial(*ctx.idempotency_key, id);
    e->doc = std::move(doc);
    publish(*e);
    return r;
  } catch (...) {
    return map_exception(std::current_exception());
  }
}

Response TrialService::mutate(const std::string& id, const std::string& action, const Json& payload,
                              const RequestContext& ctx, Mutation apply) {
  auto work = [this, id, action, payload, ctx, apply]() -> Response {
    auto e = entry(id);
    std::lock_guard lock(e->mu);
    ensure_loaded(id, *e);
    auto& doc = *e->doc;
    if (ctx.idempotency_key)
      for (const auto& j : store_.journal(id))
        if (j.contains("idempotency_key") && j.at("idempotency_key") == *ctx.idempotency_key) {
          if (j.at("action") != action) throw StateError("idempotency key reused for a different request");
          return {j.at("response").at("status").get<int>(), j.at("response").at("body")};
        }
    if (ctx.expected_version && *ctx.expected_version != doc.version)
      return error_response(409, "version_conflict",
                            "trial is at version " + std::to_string(doc.version) + ", request expected " +
                                std::to_string(*ctx.expected_version),
                            {"If-Match"});

    design::Trial trial(doc.config, doc.grid, doc.schema, doc.state);
    Json result = apply(trial);

    TrialDocument next = doc;
    next.version = doc.version + 1;
    next.state = trial.state();
    next.audit_log.push_back(make_audit(doc.audit_log, ctx.actor, action, payload));
    result["version"] = next.version;
    Response r{action == "enroll" ? 201 : 200, result};
    store_.append_journal(id, {{"seq", next.version},
                               {"action", action},
                               {"payload", payload},
                               {"idempotency_key", ctx.idempotency_key ? Json(*ctx.idempotency_key) : Json(nullptr)},
                               {"audit", audit_json(next.audit_log.back())},
                               {"response", {{"status", r.status}, {"body", r.body}}}});
    store_.save(next, doc.version);
    doc = std::move(next);
    publish(*e);
    return r;
  };
  return run_job(work, id, ctx.wait_ms);
}

Response TrialService::enroll(const std::string& id, const Json& body, const RequestContext& ctx) {
  if (!body.is_object()) return error_response(422, "invalid_input", "body must be a JSON object");
  return mutate(id, "enroll", body, ctx, [body](design::Trial& t) { return apply_action(t, "enroll", body); });
}

Response TrialService::record_outcome(const std::string& id, int patient, const Json& body, const RequestContext& ctx) {
  if (!body.is_object()) return error_response(422, "invalid_input", "body must be a JSON object");
  Json payload = body;
  payload["patient"] = patient;
  return mutate(id, "outcome", payload, ctx, [payload](design::Trial& t) { return apply_action(t, "outcome", payload); });
}

Response TrialService::advance_clock(const std::string& id, const Json& body, const RequestContext& ctx) {
  if (!body.is_object()) return error_response(422, "invalid_input", "body must be a JSON object");
  return mutate(id, "clock", body, ctx, [body](design::Trial& t) { return apply_action(t, "clock", body); });
}

Response TrialService::state(const std::string& id) {
  try {
    const auto doc = snapshot(id);
    return {200, Json{{"trial_id", id}, {"version", doc->version}, {"state", io::to_json(doc->state)}}};
  } catch (...) {
    return map_exception(std::current_exception());
  }
}

Response TrialService::report(const std::string& id) {
  try {
    const auto snap = snapshot(id);
    const auto& doc = *snap;
    design::Trial t(doc.config, doc.grid, doc.schema, doc.state);
    const auto& s = doc.state;
    const auto& schema = doc.schema;
    const auto J = doc.grid.size();

    Json out = {{"trial_id", id}, {"version", doc.version}, {"seed", s.seed}, {"n_patients", s.patients.size()}};
    out.update(stage_info(t));

    // per-dose toxicity from the current (time-weighted) data
    const auto tox = t.tox_data(false);
    const auto skel = doc.grid.skeleton();
    const auto post = crm::fit_tox_posterior(tox, skel, doc.config.tox_prior_sd);
    const auto ci = crm::tox_credible_intervals(tox, skel, doc.config.tox_prior_sd);
    std::vector<int> n(J, 0), n_tox(J, 0), n_resp(J, 0);
    for (const auto& p : s.patients) {
      auto j = static_cast<std::size_t>(p.dose);
      ++n[j];
      if (p.toxic.value_or(false) && p.tox_time <= s.now - p.arrival) ++n_tox[j];
      if (p.responded.value_or(false) && p.eff_time <= s.now - p.arrival) ++n_resp[j];
    }
    Json doses = Json::array();
    for (std::size_t j = 0; j < J; ++j)
      doses.push_back({{"level", j + 1},
                       {"dosage", doc.grid.dosage(static_cast<Level>(j))},
                       {"n_treated", n[j]},
                       {"n_toxicity", n_tox[j]},
                       {"n_response", n_resp[j]},
                       {"tox_mean", post.probs[j]},
                       {"tox_lower", ci[j].lower},
                       {"tox_upper", ci[j].upper}});
    out["doses"] = doses;

    for (auto it = s.decisions.rbegin(); it != s.decisions.rend(); ++it)
      if (!it->eff_estimates.empty()) {
        out["latest_efficacy"] = {{"patient", it->patient},
                                  {"estimates", it->eff_estimates},
                                  {"admissible", levels_out(it->admissible)}};
        break;
      }

    if (s.pk) {
      Json pk = io::to_json(*s.pk);
      pk["mtd_tox"] = level_out(s.pk->mtd_tox);
      pk["mtd_star"] = level_out(s.pk->mtd_star);
      pk["mtd_pk"] = s.pk->mtd_pk ? Json(level_out(*s.pk->mtd_pk)) : Json(nullptr);
      pk["acceptable_tox"] = levels_out(s.pk->acceptable_tox);
      out["pk_adjustment"] = pk;
    }

    Json ex = Json::array();
    for (const auto& e : s.exclusions) {
      const auto& ch = schema.characteristics()[e.characteristic];
      Json lv = Json::array();
      for (int l : e.levels) lv.push_back(ch.levels[static_cast<std::size_t>(l)]);
      ex.push_back({{"characteristic", ch.name}, {"levels", lv}, {"assessment", e.assessment}});
    }
    out["exclusions"] = ex;

    Json fut = Json::array();
    for (const auto& f : s.futility) {
      Json inc = Json::object();
      for (std::size_t k = 0; k < f.inclusion.size(); ++k) inc[schema.indicators()[k].name] = f.inclusion[k];
      Json subs = Json::array();
      for (const auto& g : f.subgroups)
        subs.push_back({{"at_level", g.value == 1},
                        {"prob_exceed", g.prob_exceed},
                        {"n_treated", g.n_treated},
                        {"criterion_met", g.criterion_met},
                        {"eliminated", g.eliminated}});
      fut.push_back({{"assessment", f.assessment},
                     {"time", f.time},
                     {"inclusion", inc},
                     {"influential", f.influential ? Json(schema.indicators()[static_cast<std::size_t>(*f.influential)].name)
                                                   : Json(nullptr)},
                     {"subgroups", subs},
                     {"trial_stop", f.trial_stop}});
    }
    out["futility"] = fut;

    if (s.obd) {
      const auto& r = *s.obd;
      Json sel = Json::array();
      for (std::size_t k = 0; k < schema.num_indicators(); ++k)
        if (r.selected >> k & 1u) sel.push_back(schema.indicators()[k].name);
      Json entries = Json::array();
      for (const auto& e : r.entries)
        entries.push_back({{"pattern", e.label},
                           {"obd", e.obd ? Json(level_out(*e.obd)) : Json(nullptr)},
                           {"futile", e.futile},
                           {"excluded", e.excluded},
                           {"mean_eff", e.mean_eff},
                           {"prob_near_max", e.prob_near_max},
                           {"prob_exceed_cf", e.prob_exceed_cf}});
      out["obd_report"] = {{"mtd", level_out(r.mtd)},
                           {"acceptable", levels_out(r.acceptable)},
                           {"tox_probs", r.tox_probs},
                           {"selected_covariates", sel},
                           {"entries", entries}};
    }
    out["empty_admissible_events"] = s.empty_admissible_events;
    return {200, out};
  } catch (...) {
    return map_exception(std::current_exception());
  }
}

Response TrialService::job(const std::string& id, const std::string& job) {
  auto st = jobs_.status(job);
  if (!st) return error_response(404, "not_found", "unknown job '" + job + "' for trial '" + id + "'");
  return {200, *st};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  Impl(TrialService& s, std::optional<std::string> t) : service(s), token(std::move(t)) {}
  TrialService& service;
  std::optional<std::string> token;
  httplib::Server server;
};

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

RequestContext context(const httplib::Request& req) {
  RequestContext ctx;
  if (req.has_header("X-Actor")) ctx.actor = req.get_header_value("X-Actor");
  if (req.has_header("Idempotency-Key")) ctx.idempotency_key = req.get_header_value("Idempotency-Key");
  if (req.has_header("If-Match")) {
    auto v = req.get_header_value("If-Match");
    v.erase(std::remove(v.begin(), v.end(), '"'), v.end());
    ctx.expected_version = std::stoll(v);
  }
  if (req.has_param("wait")) ctx.wait_ms = std::stoi(req.get_param_value("wait"));
  return ctx;
}

}  // namespace

HttpServer::HttpServer(TrialService& service, std::optional<std::string> token)
    : impl_(std::make_unique<Impl>(service, std::move(token))) {
  auto& srv = impl_->server;
  auto* impl = impl_.get();

  auto guarded = [impl](auto handler) {
    return [impl, handler](const httplib::Request& req, httplib::Response& res) {
      if (impl->token && req.get_header_value("Authorization") != "Bearer " + *impl->token) {
        send(res, error_response(401, "unauthorized", "missing or wrong bearer token"));
        return;
      }
      try {
        handler(req, res);
      } catch (const nlohmann::json::parse_error& e) {
        send(res, error_response(400, "bad_request", std::string("body is not valid JSON: ") + e.what()));
      } catch (const InputError&) {
        send(res, map_exception(std::current_exception()));
      } catch (const std::invalid_argument& e) {
        send(res, error_response(400, "bad_request", e.what()));
      } catch (...) {
        send(res, map_exception(std::current_exception()));
      }
    };
  };
  auto body = [](const httplib::Request& req) { return req.body.empty() ? Json::object() : Json::parse(req.body); };

  srv.Post("/v1/trials", guarded([impl, body](const httplib::Request& req, httplib::Response& res) {
             send(res, impl->service.create_trial(body(req), context(req)));
           }));
  srv.Post(R"(/v1/trials/([^/]+)/patients)", guarded([impl, body](const httplib::Request& req, httplib::Response& res) {
             send(res, impl->service.enroll(req.matches[1], body(req), context(req)));
           }));
  srv.Post(R"(/v1/trials/([^/]+)/patients/(\d+)/outcomes)",
           guarded([impl, body](const httplib::Request& req, httplib::Response& res) {
             send(res, impl->service.record_outcome(req.matches[1], std::stoi(req.matches[2]), body(req), context(req)));
           }));
  srv.Post(R"(/v1/trials/([^/]+)/clock)", guarded([impl, body](const httplib::Request& req, httplib::Response& res) {
             send(res, impl->service.advance_clock(req.matches[1], body(req), context(req)));
           }));
  srv.Get(R"(/v1/trials/([^/]+)/report)", guarded([impl](const httplib::Request& req, httplib::Response& res) {
            send(res, impl->service.report(req.matches[1]));
          }));
  srv.Get(R"(/v1/trials/([^/]+)/state)", guarded([impl](const httplib::Request& req, httplib::Response& res) {
            send(res, impl->service.state(req.matches[1]));
          }));
  srv.Get(R"(/v1/trials/([^/]+)/jobs/([^/]+))", guarded([impl](const httplib::Request& req, httplib::Response& res) {
            send(res, impl->service.job(req.matches[1], req.matches[2]));
          }));
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace doseopt::service
