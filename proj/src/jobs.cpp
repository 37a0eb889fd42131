#include "psx/jobs.hpp"

#include <algorithm>
#include <exception>

namespace psx {

std::string to_string(JobKind kind) {
  switch (kind) {
    case JobKind::attribution: return "attribution";
    case JobKind::sweep: return "sweep";
    case JobKind::ablation: return "ablation";
    case JobKind::adversarial: return "adversarial";
    case JobKind::train: return "train";
  }
  return "unknown";
}

std::string to_string(JobStatus status) {
  switch (status) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "unknown";
}

std::optional<JobKind> parse_job_kind(std::string_view text) {
  for (auto kind : {JobKind::attribution, JobKind::sweep, JobKind::ablation, JobKind::adversarial, JobKind::train}) {
    if (to_string(kind) == text) return kind;
  }
  return std::nullopt;
}

nlohmann::json to_json(const JobSnapshot& job) {
  nlohmann::json j{{"id", job.id},
                   {"kind", to_string(job.kind)},
                   {"status", to_string(job.status)},
                   {"progress", job.progress},
                   {"has_result", job.has_result},
                   {"parameters", job.parameters}};
  if (!job.error.empty()) j["error"] = job.error;
  return j;
}

JobQueue::JobQueue(std::size_t workers) {
  workers = std::max<std::size_t>(workers, 1);
  for (std::size_t i = 0; i < workers; ++i) {
    workers_.emplace_back([this](std::stop_token stop) { run_worker(stop); });
  }
}

JobQueue::~JobQueue() {
  for (auto& w : workers_) w.request_stop();
  changed_.notify_all();
  workers_.clear();
}

std::string JobQueue::submit(JobKind kind, nlohmann::json parameters, JobBody body) {
  std::string id;
  {
    std::lock_guard lock(mutex_);
    id = "job-" + std::to_string(next_id_++);
    Entry entry;
    entry.snapshot.id = id;
    entry.snapshot.kind = kind;
    entry.snapshot.parameters = std::move(parameters);
    entry.body = std::move(body);
    jobs_.emplace(id, std::move(entry));
    pending_.push_back(id);
  }
  changed_.notify_all();
  return id;
}

std::optional<JobSnapshot> JobQueue::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second.snapshot;
}

std::optional<nlohmann::json> JobQueue::result(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end() || it->second.snapshot.status != JobStatus::done) return std::nullopt;
  return std::optional<nlohmann::json>(std::in_place, it->second.result);
}

std::optional<JobSnapshot> JobQueue::wait(const std::string& id, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  const auto finished = [&] {
    const auto it = jobs_.find(id);
    return it == jobs_.end() || it->second.snapshot.status == JobStatus::done ||
           it->second.snapshot.status == JobStatus::failed;
  };
  changed_.wait_for(lock, timeout, finished);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second.snapshot;
}

std::vector<JobSnapshot> JobQueue::list() const {
  std::lock_guard lock(mutex_);
  std::vector<JobSnapshot> out;
  for (const auto& [id, entry] : jobs_) out.push_back(entry.snapshot);
  return out;
}

void JobQueue::run_worker(std::stop_token stop) {
  while (true) {
    std::string id;
    JobBody body;
    {
      std::unique_lock lock(mutex_);
      changed_.wait(lock, stop, [&] { return !pending_.empty(); });
      if (stop.stop_requested()) return;
      id = pending_.front();
      pending_.pop_front();
      auto& entry = jobs_.at(id);
      entry.snapshot.status = JobStatus::running;
      body = std::move(entry.body);
    }
    changed_.notify_all();

    const JobProgress progress = [this, &id](std::size_t done, std::size_t total) {
      if (total == 0) return;
      const double fraction = std::min(1.0, static_cast<double>(done) / static_cast<double>(total));
      std::lock_guard lock(mutex_);
      auto& snapshot = jobs_.at(id).snapshot;
      // a finished job keeps its final progress
      if (snapshot.status == JobStatus::running) snapshot.progress = std::max(snapshot.progress, fraction);
    };
    nlohmann::json result;
    std::string error;
    try {
      result = body(progress);
    } catch (const std::exception& e) {
      error = e.what();
      if (error.empty()) error = "job failed";
    } catch (...) {
      error = "job failed with an unknown error";
    }
    {
      std::lock_guard lock(mutex_);
      auto& entry = jobs_.at(id);
      if (error.empty()) {
        entry.result = std::move(result);
        entry.snapshot.status = JobStatus::done;
        entry.snapshot.progress = 1.0;
        entry.snapshot.has_result = true;
      } else {
        entry.snapshot.status = JobStatus::failed;
        entry.snapshot.error = std::move(error);
      }
    }
    changed_.notify_all();
  }
}

}  // namespace psx
