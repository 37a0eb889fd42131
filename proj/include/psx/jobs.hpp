#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace psx {

enum class JobKind { attribution, sweep, ablation, adversarial, train };
enum class JobStatus { queued, running, done, failed };

std::string to_string(JobKind kind);
std::string to_string(JobStatus status);
std::optional<JobKind> parse_job_kind(std::string_view text);

struct JobSnapshot {
  std::string id;
  JobKind kind = JobKind::attribution;
  JobStatus status = JobStatus::queued;
  double progress = 0.0;
  std::string error;
  bool has_result = false;
  nlohmann::json parameters;
};

nlohmann::json to_json(const JobSnapshot& job);

/// Reports (completed, total) work units; the queue turns this into a
/// nondecreasing fraction.
using JobProgress = std::function<void(std::size_t, std::size_t)>;
using JobBody = std::function<nlohmann::json(const JobProgress&)>;

/// Fixed pool of workers draining a FIFO of jobs. Status only moves forward
/// (queued, running, then done or failed) and progress never decreases.
class JobQueue {
 public:
  explicit JobQueue(std::size_t workers = 1);
  ~JobQueue();
  JobQueue(const JobQueue&) = delete;
  JobQueue& operator=(const JobQueue&) = delete;

  std::string submit(JobKind kind, nlohmann::json parameters, JobBody body);
  std::optional<JobSnapshot> get(const std::string& id) const;
  /// Result of a finished job; nullopt while pending or after failure.
  std::optional<nlohmann::json> result(const std::string& id) const;
  /// Blocks until the job finishes or the timeout elapses.
  std::optional<JobSnapshot> wait(const std::string& id, std::chrono::milliseconds timeout) const;
  std::vector<JobSnapshot> list() const;

 private:
  struct Entry {
    JobSnapshot snapshot;
    JobBody body;
    nlohmann::json result;
  };

  void run_worker(std::stop_token stop);

  mutable std::mutex mutex_;
  mutable std::condition_variable_any changed_;
  std::map<std::string, Entry> jobs_;
  std::deque<std::string> pending_;
  std::uint64_t next_id_ = 1;
  std::vector<std::jthread> workers_;
};

}  // namespace psx
