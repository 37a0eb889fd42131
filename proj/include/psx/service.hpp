#pragma once

#include <map>
#include <memory>
#include <shared_mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "psx/classifier.hpp"
#include "psx/dataset.hpp"
#include "psx/jobs.hpp"

namespace httplib {
class Server;
}

namespace psx {

struct ModelEntry {
  std::string id;
  std::string path;
  std::shared_ptr<const ModelBundle> bundle;
  std::shared_ptr<const Network<float>> network;
  SplitModel split;
};

/// Model and dataset registries plus the job queue behind the HTTP API. Every
/// request is JSON in, JSON out; failures throw psx::Error before any job is
/// created.
class Service {
 public:
  explicit Service(std::size_t job_workers = 1);

  /// Loads a PSX manifest (blob alongside). The id defaults to the file stem.
  std::string load_model(const std::string& path, std::string id = {});
  std::string add_model(std::string id, ModelBundle bundle, std::string path = {});
  void add_dataset(std::string id, LabeledDataset dataset);

  std::shared_ptr<const ModelEntry> model(const std::string& id) const;
  std::shared_ptr<const LabeledDataset> dataset(const std::string& id) const;

  nlohmann::json list_models() const;
  nlohmann::json register_models(const nlohmann::json& request);
  nlohmann::json dataset_samples(const std::string& id, std::size_t class_index, std::uint64_t seed,
                                 std::size_t n) const;
  /// Validates and queues; returns the new job's snapshot.
  nlohmann::json submit(const nlohmann::json& request);
  nlohmann::json job(const std::string& id) const;
  nlohmann::json job_result(const std::string& id) const;
  nlohmann::json score(const nlohmann::json& request) const;

  JobQueue& jobs() noexcept { return jobs_; }

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const ModelEntry>> models_;
  std::map<std::string, std::shared_ptr<const LabeledDataset>> datasets_;
  JobQueue jobs_;
};

/// HTTP status for a library error code.
int http_status(ErrorCode code);
nlohmann::json error_body(ErrorCode code, const std::string& message);

void install_routes(httplib::Server& server, Service& service);

}  // namespace psx
