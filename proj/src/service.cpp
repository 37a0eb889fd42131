#include "psx/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <filesystem>
#include <mutex>

#include "psx/architectures.hpp"
#include "psx/perturb.hpp"
#include "psx/protoshot.hpp"
#include "psx/trainer.hpp"
#include "psx/wire.hpp"

namespace psx {

using nlohmann::json;

namespace {

[[noreturn]] void bad_request(const std::string& message) { fail(ErrorCode::invalid_argument, message); }

const json& require(const json& object, const char* key) {
  if (!object.is_object() || !object.contains(key)) bad_request(std::string("missing field '") + key + "'");
  return object.at(key);
}

template <typename T>
T get_as(const json& value, const char* key) {
  try {
    return value.get<T>();
  } catch (const json::exception&) {
    bad_request(std::string("field '") + key + "' has the wrong type");
  }
}

template <typename T>
T field(const json& object, const char* key) {
  return get_as<T>(require(object, key), key);
}

template <typename T>
T field_or(const json& object, const char* key, T fallback) {
  if (!object.is_object() || !object.contains(key) || object.at(key).is_null()) return fallback;
  return get_as<T>(object.at(key), key);
}

std::size_t count_field(const json& object, const char* key, std::size_t fallback) {
  if (!object.is_object() || !object.contains(key)) return fallback;
  const auto& v = object.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) bad_request(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

// A query is either an inline image or a dataset sample.
struct Query {
  Tensor image;
  std::shared_ptr<const LabeledDataset> dataset;
};

struct Support {
  std::vector<Tensor> images;
  std::vector<std::size_t> indices;
  std::uint64_t seed = 0;
  std::shared_ptr<const LabeledDataset> dataset;
};

std::string describe(const Shape& shape) { return shape_string(shape); }

}  // namespace

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::io:
    case ErrorCode::non_finite: return 422;
    default: return 400;
  }
}

json error_body(ErrorCode code, const std::string& message) {
  return {{"error", {{"code", std::string(to_string(code))}, {"message", message}}}};
}

Service::Service(std::size_t job_workers) : jobs_(job_workers) {}

std::string Service::load_model(const std::string& path, std::string id) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::not_found, "model manifest " + path + " does not exist");
  auto bundle = psx::load_model(path, default_blob_path(path));
  if (id.empty()) id = std::filesystem::path(path).stem().string();
  return add_model(std::move(id), std::move(bundle), path);
}

std::string Service::add_model(std::string id, ModelBundle bundle, std::string path) {
  if (id.empty()) bad_request("model id must not be empty");
  auto shared_bundle = std::make_shared<const ModelBundle>(std::move(bundle));
  auto network = std::make_shared<const Network<float>>(*shared_bundle);
  auto split = split_model(network);
  auto entry = std::make_shared<const ModelEntry>(
      ModelEntry{id, std::move(path), std::move(shared_bundle), std::move(network), std::move(split)});
  std::unique_lock lock(mutex_);
  models_[id] = std::move(entry);
  return id;
}

void Service::add_dataset(std::string id, LabeledDataset dataset) {
  if (id.empty()) bad_request("dataset id must not be empty");
  std::unique_lock lock(mutex_);
  datasets_[std::move(id)] = std::make_shared<const LabeledDataset>(std::move(dataset));
}

std::shared_ptr<const ModelEntry> Service::model(const std::string& id) const {
  std::shared_lock lock(mutex_);
  const auto it = models_.find(id);
  if (it == models_.end()) fail(ErrorCode::not_found, "unknown model '" + id + "'");
  return it->second;
}

std::shared_ptr<const LabeledDataset> Service::dataset(const std::string& id) const {
  std::shared_lock lock(mutex_);
  const auto it = datasets_.find(id);
  if (it == datasets_.end()) fail(ErrorCode::not_found, "unknown dataset '" + id + "'");
  return it->second;
}

json Service::list_models() const {
  std::shared_lock lock(mutex_);
  json out = json::array();
  for (const auto& [id, entry] : models_) {
    const auto& manifest = entry->bundle->manifest();
    const auto params = count_parameters(manifest);
    out.push_back({{"id", id},
                   {"path", entry->path},
                   {"input_shape", manifest.input_shape},
                   {"feature_layer", manifest.feature_layer},
                   {"feature_width", entry->split.features.width()},
                   {"class_labels", manifest.class_labels},
                   {"has_head", entry->bundle->has_head()},
                   {"parameters",
                    {{"total", params.total}, {"trainable", params.trainable}, {"non_trainable", params.non_trainable}}}});
  }
  return out;
}

json Service::register_models(const json& request) {
  // {"path": p, "id"?: s} or {"models": [{"path": p, "id"?: s}, ...]}
  std::vector<json> items;
  if (request.is_object() && request.contains("models")) {
    const auto& list = request.at("models");
    if (!list.is_array()) bad_request("'models' must be an array");
    items.assign(list.begin(), list.end());
  } else {
    items.push_back(request);
  }
  // validate every path before registering any
  for (const auto& item : items) {
    const auto path = field<std::string>(item, "path");
    if (!std::filesystem::exists(path)) fail(ErrorCode::not_found, "model manifest " + path + " does not exist");
  }
  json ids = json::array();
  for (const auto& item : items) {
    ids.push_back(load_model(field<std::string>(item, "path"), field_or<std::string>(item, "id", "")));
  }
  return {{"registered", ids}};
}

json Service::dataset_samples(const std::string& id, std::size_t class_index, std::uint64_t seed,
                              std::size_t n) const {
  const auto ds = dataset(id);
  const auto support = select_support_set(*ds, class_index, n, seed);
  json images = json::array();
  json labels = json::array();
  for (auto i : support.indices) {
    images.push_back(encode_tensor(ds->image(i)));
    labels.push_back(ds->label(i));
  }
  return {{"dataset", id}, {"class", class_index}, {"seed", seed},
          {"indices", support.indices}, {"labels", labels}, {"images", images}};
}

namespace {

struct Resolver {
  const Service& service;

  Query query(const json& request, const Shape& input_shape) const {
    const auto& q = require(request, "query");
    Query out;
    if (q.is_object() && q.contains("dataset")) {
      out.dataset = service.dataset(field<std::string>(q, "dataset"));
      const auto index = count_field(q, "index", 0);
      if (index >= out.dataset->size()) {
        bad_request("query index " + std::to_string(index) + " out of range for " +
                    std::to_string(out.dataset->size()) + " samples");
      }
      out.image = out.dataset->image(index);
    } else {
      out.image = decode_tensor(q);
    }
    if (out.image.shape() != input_shape) {
      fail(ErrorCode::shape_mismatch, "query shape " + describe(out.image.shape()) + " does not match model input " +
                                          describe(input_shape));
    }
    return out;
  }

  Support support(const json& request, std::size_t class_index, const Shape& input_shape) const {
    const auto& s = require(request, "support");
    Support out;
    if (s.is_object() && s.contains("images")) {
      const auto& list = s.at("images");
      if (!list.is_array() || list.empty()) bad_request("support images must be a non-empty array");
      for (const auto& item : list) out.images.push_back(decode_tensor(item));
    } else {
      out.dataset = service.dataset(field<std::string>(s, "dataset"));
      out.seed = field_or<std::uint64_t>(s, "seed", 0);
      const auto selection = select_support_set(*out.dataset, class_index, count_field(s, "n", 100), out.seed);
      out.indices = selection.indices;
      out.images = support_images(*out.dataset, selection);
    }
    for (const auto& image : out.images) {
      if (image.shape() != input_shape) {
        fail(ErrorCode::shape_mismatch, "support image shape " + describe(image.shape()) +
                                            " does not match model input " + describe(input_shape));
      }
    }
    return out;
  }
};

std::size_t class_field(const json& request, const ModelEntry& model) {
  if (!request.contains("class")) bad_request("missing field 'class'");
  const auto c = count_field(request, "class", 0);
  if (c >= model.split.head.class_count) {
    bad_request("class " + std::to_string(c) + " out of range for model '" + model.id + "' with " +
                std::to_string(model.split.head.class_count) + " classes");
  }
  return c;
}

json score_json(const ScoreRecord& record) {
  return {{"score", record.score}, {"components", record.components}, {"degenerate", record.degenerate}};
}

json map_json(const AttributionMap& map) {
  const auto display = normalize_for_display(map.values);
  return {{"height", map.height},
          {"width", map.width},
          {"values", map.values},
          {"color_bound", display.color_bound},
          {"reference_score", map.reference_score},
          {"patch_size", map.patch_size},
          {"reference_value", map.reference_value}};
}

std::vector<float> default_reference(const Tensor& query, const std::shared_ptr<const LabeledDataset>& dataset) {
  const std::size_t channels = query.dim(2);
  if (channels == 1 || !dataset) return std::vector<float>(channels, 0.0f);
  return dataset->channel_mean();
}

}  // namespace

json Service::score(const json& request) const {
  const auto m = model(field<std::string>(request, "model"));
  const auto c = class_field(request, *m);
  const Resolver resolve{*this};
  const auto& shape = m->bundle->manifest().input_shape;
  const auto support = resolve.support(request, c, shape);
  const auto query = resolve.query(request, shape);
  const auto prototype = compute_prototype(m->split.features, m->split.head, c, support.images, support.seed);
  auto out = score_json(protoshot_score(prototype, m->split.features, m->split.head, query.image));
  out["class"] = c;
  out["support_indices"] = support.indices;
  return out;
}

json Service::submit(const json& request) {
  if (!request.is_object()) bad_request("job request must be a JSON object");
  const auto kind_text = field<std::string>(request, "kind");
  const auto kind = parse_job_kind(kind_text);
  if (!kind) bad_request("unknown job kind '" + kind_text + "'");
  const Resolver resolve{*this};
  JobBody body;

  switch (*kind) {
    case JobKind::attribution: {
      const auto m = model(field<std::string>(request, "model"));
      const auto c = class_field(request, *m);
      const auto& shape = m->bundle->manifest().input_shape;
      if (shape.size() != 3) bad_request("attribution needs an image model");
      auto support = resolve.support(request, c, shape);
      auto query = resolve.query(request, shape);
      AttributionOptions options;
      options.patch_size = count_field(request, "patch", 1);
      if (options.patch_size == 0 || options.patch_size > std::min(shape[0], shape[1])) {
        bad_request("patch size must lie in [1, " + std::to_string(std::min(shape[0], shape[1])) + "]");
      }
      options.batch_size = std::max<std::size_t>(1, count_field(request, "batch_size", 32));
      options.workers = count_field(request, "workers", 0);
      options.reference_value =
          field_or<std::vector<float>>(request, "reference_value", default_reference(query.image, query.dataset));
      if (options.reference_value.size() != shape[2] && options.reference_value.size() != 1) {
        bad_request("reference_value must have 1 or " + std::to_string(shape[2]) + " channels");
      }
      body = [m, c, support = std::move(support), query = std::move(query), options](const JobProgress& progress) {
        auto opts = options;
        opts.progress = progress;
        const auto prototype = compute_prototype(m->split.features, m->split.head, c, support.images, support.seed);
        auto out = map_json(attribution_map(prototype, m->split.features, m->split.head, query.image, opts));
        out["class"] = c;
        out["support_indices"] = support.indices;
        return out;
      };
      break;
    }
    case JobKind::sweep: {
      const auto m = model(field<std::string>(request, "model"));
      if (!m->bundle->has_head()) bad_request("rotation sweeps need a model with a classification head");
      const auto& shape = m->bundle->manifest().input_shape;
      auto query = resolve.query(request, shape);
      const auto ds = dataset(field<std::string>(request, "dataset"));
      const auto classes = field_or<std::vector<std::size_t>>(request, "classes", {0, 5, 6, 9});
      if (classes.empty()) bad_request("'classes' must not be empty");
      const auto n = count_field(request, "n", 100);
      const auto seed = field_or<std::uint64_t>(request, "seed", 0);
      SweepOptions options;
      options.step_degrees = field_or<double>(request, "step", 1.0);
      if (!(options.step_degrees > 0.0)) bad_request("'step' must be positive");
      if (shape.size() != 3 || shape[0] != shape[1] || shape[2] != 1) {
        bad_request("rotation sweeps need a square single-channel input");
      }
      std::vector<SupportSet> supports;
      for (auto c : classes) {
        if (c >= m->split.head.class_count) bad_request("class " + std::to_string(c) + " out of range");
        supports.push_back(select_support_set(*ds, c, n, seed));
      }
      body = [m, ds, supports, query = std::move(query), options](const JobProgress& progress) {
        std::vector<ClassReference> refs;
        for (const auto& s : supports) refs.push_back(make_class_reference(m->split.features, m->split.head, *ds, s));
        auto opts = options;
        opts.progress = progress;
        const auto trace = rotation_sweep(m->split, refs, query.image, opts);
        auto out = json::parse(sweep_to_json(trace));
        out["seed"] = supports.front().seed;
        out["n"] = supports.front().indices.size();
        return out;
      };
      break;
    }
    case JobKind::ablation: {
      const auto m = model(field<std::string>(request, "model"));
      const auto c = class_field(request, *m);
      const auto& shape = m->bundle->manifest().input_shape;
      auto support = resolve.support(request, c, shape);
      auto query = resolve.query(request, shape);
      std::vector<RegionMask> masks;
      const auto& list = require(request, "masks");
      if (!list.is_array()) bad_request("'masks' must be an array");
      for (const auto& item : list) {
        RegionMask mask;
        mask.id = field<std::string>(item, "id");
        mask.height = shape[0];
        mask.width = shape[1];
        const auto cells = field<std::vector<int>>(item, "cells");
        if (cells.size() != mask.height * mask.width) {
          fail(ErrorCode::shape_mismatch, "mask '" + mask.id + "' has " + std::to_string(cells.size()) +
                                              " cells, expected " + std::to_string(mask.height * mask.width));
        }
        for (int v : cells) mask.cells.push_back(v != 0);
        masks.push_back(std::move(mask));
      }
      body = [m, c, support = std::move(support), query = std::move(query), masks](const JobProgress& progress) {
        const auto prototype = compute_prototype(m->split.features, m->split.head, c, support.images, support.seed);
        const auto results = region_ablation(prototype, m->split.features, m->split.head, query.image, masks);
        progress(1, 1);
        json list = json::array();
        for (const auto& r : results) list.push_back({{"id", r.id}, {"score", r.score}});
        return json{{"class", c}, {"results", list}};
      };
      break;
    }
    case JobKind::adversarial: {
      const auto m = model(field<std::string>(request, "model"));
      if (!m->bundle->has_head()) bad_request("adversarial scoring needs a model with a classification head");
      const auto ds = dataset(field<std::string>(request, "dataset"));
      const auto support_ds = dataset(field_or<std::string>(request, "support_dataset", field<std::string>(request, "dataset")));
      const auto n = count_field(request, "n", 500);
      if (n == 0 || n > ds->size()) bad_request("'n' must lie in [1, " + std::to_string(ds->size()) + "]");
      const auto seed = field_or<std::uint64_t>(request, "seed", 0);
      const auto epsilon = field_or<double>(request, "epsilon", kDefaultEpsilon);
      if (!(epsilon >= 0.0)) bad_request("'epsilon' must be >= 0");
      const auto support_n = count_field(request, "support_n", 100);
      const auto support_seed = field_or<std::uint64_t>(request, "support_seed", seed);
      std::vector<SupportSet> supports;
      for (std::size_t c = 0; c < m->split.head.class_count; ++c) {
        supports.push_back(select_support_set(*support_ds, c, support_n, support_seed));
      }
      body = [m, ds, support_ds, supports, n, seed, epsilon](const JobProgress& progress) {
        std::vector<Prototype> prototypes;
        for (const auto& s : supports) {
          prototypes.push_back(compute_prototype(m->split.features, m->split.head, *support_ds, s));
        }
        DistributionOptions options;
        options.progress = progress;
        const auto dist = score_distributions(m->split, prototypes, *ds, n, seed, epsilon, options);
        const auto roc = detector_roc(dist.benign, dist.adversarial);
        const auto mean = [](const std::vector<double>& v) {
          double s = 0;
          for (double x : v) s += x;
          return s / static_cast<double>(v.size());
        };
        return json{{"indices", dist.indices},
                    {"benign", dist.benign},
                    {"adversarial", dist.adversarial},
                    {"mean_benign", mean(dist.benign)},
                    {"mean_adversarial", mean(dist.adversarial)},
                    {"epsilon", epsilon},
                    {"roc", json::parse(roc_to_json(roc))}};
      };
      break;
    }
    case JobKind::train: {
      const auto ds = dataset(field<std::string>(request, "dataset"));
      const auto architecture = field_or<std::string>(request, "architecture", "reduced_mnist_cnn");
      Manifest manifest;
      if (architecture == "reduced_mnist_cnn") {
        manifest = architectures::reduced_mnist_cnn();
      } else if (architecture == "mnist_cnn") {
        manifest = architectures::mnist_cnn();
      } else {
        bad_request("unknown architecture '" + architecture + "'");
      }
      if (ds->image_shape() != manifest.input_shape) {
        fail(ErrorCode::shape_mismatch, "dataset images " + describe(ds->image_shape()) +
                                            " do not match architecture input " + describe(manifest.input_shape));
      }
      TrainConfig config;
      config.learning_rate = field_or<double>(request, "learning_rate", 1e-3);
      config.batch_size = count_field(request, "batch_size", 32);
      config.epochs = count_field(request, "epochs", 10);
      config.seed = field_or<std::uint64_t>(request, "seed", 1);
      config.dropout = field_or<bool>(request, "dropout", true);
      const auto optimizer = field_or<std::string>(request, "optimizer", "adam");
      if (optimizer == "sgd") {
        config.optimizer = OptimizerKind::sgd;
      } else if (optimizer != "adam") {
        bad_request("unknown optimizer '" + optimizer + "'");
      }
      config.validate();
      const auto train_count = count_field(request, "train_count", 2000);
      const auto test_count = count_field(request, "test_count", 1000);
      if (train_count == 0 || train_count + test_count > ds->size()) {
        fail(ErrorCode::insufficient_samples, "split of " + std::to_string(train_count) + " + " +
                                                  std::to_string(test_count) + " exceeds " +
                                                  std::to_string(ds->size()) + " samples");
      }
      const auto model_id = field_or<std::string>(request, "model_id", "");
      const auto out_path = field_or<std::string>(request, "out", "");
      body = [this, ds, manifest, config, train_count, test_count, model_id, out_path](const JobProgress& progress) {
        const auto split = split_dataset(*ds, train_count, test_count, config.seed);
        auto result = train(initialize_model(manifest, config.seed), split.first, config, progress);
        const double accuracy = test_count ? evaluate_accuracy(result.model, split.second) : 0.0;
        if (!out_path.empty()) save_model(result.model, out_path, default_blob_path(out_path));
        json out{{"accuracy", accuracy}, {"epoch_loss", result.epoch_loss}, {"path", out_path}};
        if (!model_id.empty()) out["model"] = add_model(model_id, std::move(result.model), out_path);
        return out;
      };
      break;
    }
  }
  json parameters = request;
  const auto id = jobs_.submit(*kind, std::move(parameters), std::move(body));
  return to_json(*jobs_.get(id));
}

json Service::job(const std::string& id) const {
  const auto snapshot = jobs_.get(id);
  if (!snapshot) fail(ErrorCode::not_found, "unknown job '" + id + "'");
  return to_json(*snapshot);
}

json Service::job_result(const std::string& id) const {
  const auto snapshot = jobs_.get(id);
  if (!snapshot) fail(ErrorCode::not_found, "unknown job '" + id + "'");
  if (snapshot->status == JobStatus::failed) fail(ErrorCode::invalid_argument, "job failed: " + snapshot->error);
  const auto result = jobs_.result(id);
  if (!result) fail(ErrorCode::not_found, "job '" + id + "' has no result yet (" + to_string(snapshot->status) + ")");
  return *result;
}

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Handler>
void guarded(httplib::Response& res, Handler&& handler) {
  try {
    reply(res, 200, handler());
  } catch (const Error& e) {
    reply(res, http_status(e.code()), error_body(e.code(), e.what()));
  } catch (const json::exception& e) {
    reply(res, 400, error_body(ErrorCode::format, e.what()));
  } catch (const std::exception& e) {
    reply(res, 500, error_body(ErrorCode::io, e.what()));
  }
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception&) {
    fail(ErrorCode::format, "request body is not valid JSON");
  }
}

std::uint64_t query_number(const httplib::Request& req, const char* key, std::optional<std::uint64_t> fallback) {
  if (!req.has_param(key)) {
    if (fallback) return *fallback;
    bad_request(std::string("missing query parameter '") + key + "'");
  }
  const auto text = req.get_param_value(key);
  std::size_t used = 0;
  std::uint64_t value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') {
    bad_request(std::string("query parameter '") + key + "' must be a non-negative integer");
  }
  return value;
}

}  // namespace

void install_routes(httplib::Server& server, Service& service) {
  server.Get("/models", [&](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return json{{"models", service.list_models()}}; });
  });
  server.Post("/models", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.register_models(parse_body(req)); });
  });
  server.Get(R"(/datasets/([^/]+)/samples)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      return service.dataset_samples(req.matches[1], query_number(req, "class", std::nullopt),
                                     query_number(req, "seed", 0), query_number(req, "n", 1));
    });
  });
  server.Post("/jobs", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.submit(parse_body(req)); });
  });
  server.Get(R"(/jobs/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.job(req.matches[1]); });
  });
  server.Get(R"(/jobs/([^/]+)/result)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.job_result(req.matches[1]); });
  });
  server.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.score(parse_body(req)); });
  });
}

}  // namespace psx
