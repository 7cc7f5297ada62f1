#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "doseopt/design_engine.hpp"
#include "doseopt/serialization.hpp"

namespace doseopt::service {

using io::Json;

struct Response {
  int status = 200;
  Json body;
};

// Error body {code, message, field_paths} with the matching HTTP status.
Response error_response(int status, const std::string& code, const std::string& message,
                        std::vector<std::string> field_paths = {});

std::string sha256_hex(const std::string& data);

struct AuditEntry {
  std::int64_t seq = 0;
  std::string timestamp;
  std::string actor;
  std::string action;
  std::string payload_digest;
  std::string chain_digest;  // sha256(previous chain digest + this entry)

  bool operator==(const AuditEntry&) const = default;
};

struct TrialDocument {
  std::string trial_id;
  std::int64_t version = 0;
  design::DesignConfig config;
  DoseGrid grid{DoseGrid::default_skeleton(), DoseGrid::default_skeleton()};
  bsgs::CovariateSchema schema;
  design::TrialState state;
  std::vector<AuditEntry> audit_log;
};

Json to_json(const TrialDocument& doc);
TrialDocument document_from_json(const Json& j);

// One JSON document per trial plus an append-only journal of the mutating
// requests, under <root>/trials/<id>/.
class FileStore {
 public:
  explicit FileStore(std::filesystem::path root);

  bool exists(const std::string& id) const;
  std::optional<TrialDocument> load(const std::string& id) const;
  // Atomic replace. Throws StateError when the stored version differs from
  // expected_version (0 for a new document).
  void save(const TrialDocument& doc, std::int64_t expected_version);

  void append_journal(const std::string& id, const Json& entry);
  std::vector<Json> journal(const std::string& id) const;

  std::optional<std::string> idempotent_trial(const std::string& key) const;
  void remember_idempotent_trial(const std::string& key, const std::string& id);

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path dir(const std::string& id) const;
  std::filesystem::path root_;
  mutable std::mutex mu_;
};

// Bounded pool of model-fitting jobs.
class JobPool {
 public:
  explicit JobPool(int workers);
  ~JobPool();
  JobPool(const JobPool&) = delete;
  JobPool& operator=(const JobPool&) = delete;

  std::string submit(std::function<Response()> work);
  // Waits up to wait_ms for the job; nullopt while it is still queued or running.
  std::optional<Response> wait(const std::string& job, int wait_ms);
  // {status, result?}; nullopt for an unknown job.
  std::optional<Json> status(const std::string& job);

 private:
  struct Job {
    std::function<Response()> work;
    bool done = false;
    bool running = false;
    Response result;
  };
  void run();

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::deque<std::string> queue_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::uint64_t counter_ = 0;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

struct RequestContext {
  std::string actor = "api";
  std::optional<std::string> idempotency_key;
  std::optional<std::int64_t> expected_version;  // If-Match
  int wait_ms = 30000;
};

class TrialService {
 public:
  TrialService(std::filesystem::path data_dir, int workers);

  Response create_trial(const Json& body, const RequestContext& ctx);
  Response enroll(const std::string& id, const Json& body, const RequestContext& ctx);
  Response record_outcome(const std::string& id, int patient, const Json& body, const RequestContext& ctx);
  Response advance_clock(const std::string& id, const Json& body, const RequestContext& ctx);
  Response report(const std::string& id);
  Response state(const std::string& id);
  Response job(const std::string& id, const std::string& job);

  // Rebuilds the trial by replaying its journal from creation.
  design::TrialState replay(const std::string& id) const;

 private:
  struct Entry {
    std::mutex mu;  // held by the writer for the whole mutation
    std::optional<TrialDocument> doc;
    std::mutex snap_mu;
    std::shared_ptr<const TrialDocument> snap;  // last committed version, for readers
  };
  using Mutation = std::function<Json(design::Trial&)>;

  std::shared_ptr<Entry> entry(const std::string& id);
  void ensure_loaded(const std::string& id, Entry& e);
  static void publish(Entry& e);
  std::shared_ptr<const TrialDocument> snapshot(const std::string& id);
  Response mutate(const std::string& id, const std::string& action, const Json& payload, const RequestContext& ctx,
                  Mutation apply);
  Response run_job(std::function<Response()> work, const std::string& trial_id, int wait_ms);

  FileStore store_;
  JobPool jobs_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
};

// Applies one journaled request to a trial; shared by live requests and replay.
Json apply_action(design::Trial& trial, const std::string& action, const Json& payload);

// The /v1 routes over HTTP. bind() returns the bound port (port 0 picks a free
// one); serve() blocks until stop().
class HttpServer {
 public:
  HttpServer(TrialService& service, std::optional<std::string> token = std::nullopt);
  ~HttpServer();
  int bind(const std::string& host, int port);
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace doseopt::service
