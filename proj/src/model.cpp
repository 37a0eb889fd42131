#include "psx/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace psx {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

bool is_head_layer(LayerKind kind) {
  return kind == LayerKind::dropout || kind == LayerKind::dense || kind == LayerKind::softmax;
}

void check_head(const Manifest& manifest, std::size_t feature) {
  const auto& layers = manifest.layers;
  if (feature + 1 == layers.size()) return;
  std::size_t dense = 0;
  for (std::size_t i = feature + 1; i < layers.size(); ++i) {
    if (!is_head_layer(layers[i].kind)) {
      fail(ErrorCode::unsupported, "classification head may only contain dropout, one dense layer "
                                   "and a final softmax; found " +
                                       std::string(to_string(layers[i].kind)) + " layer '" +
                                       layers[i].name + "'");
    }
    if (layers[i].kind == LayerKind::dense) ++dense;
    if (layers[i].kind == LayerKind::softmax && i + 1 != layers.size()) {
      fail(ErrorCode::unsupported, "softmax must be the last layer of the classification head");
    }
  }
  if (dense != 1 || layers.back().kind != LayerKind::softmax) {
    fail(ErrorCode::unsupported, "classification head must be a single dense layer plus softmax");
  }
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

ordered_json layer_to_json(const LayerSpec& layer, std::size_t& offset) {
  ordered_json j;
  j["name"] = layer.name;
  j["kind"] = to_string(layer.kind);
  switch (layer.kind) {
    case LayerKind::conv2d:
      j["filters"] = layer.filters;
      j["kernel"] = {layer.kernel_h, layer.kernel_w};
      j["stride"] = layer.stride;
      j["padding"] = to_string(layer.padding);
      break;
    case LayerKind::maxpool2d:
      j["pool"] = layer.pool;
      j["padding"] = to_string(Padding::valid);
      break;
    case LayerKind::dense:
      j["units"] = layer.units;
      break;
    case LayerKind::batchnorm:
      j["epsilon"] = layer.epsilon;
      break;
    case LayerKind::dropout:
      j["rate"] = layer.rate;
      break;
    default:
      break;
  }
  ordered_json weights = ordered_json::array();
  for (const auto& w : layer.weights) {
    const std::size_t bytes = element_count(w.shape) * sizeof(float);
    ordered_json entry;
    entry["name"] = w.name;
    entry["shape"] = w.shape;
    entry["offset"] = offset;
    entry["byte_length"] = bytes;
    entry["trainable"] = w.trainable;
    weights.push_back(std::move(entry));
    offset += bytes;
  }
  j["weights"] = std::move(weights);
  return j;
}

template <typename J>
std::size_t get_size(const J& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) {
    fail(ErrorCode::format, std::string("manifest field '") + key + "' must be a non-negative integer");
  }
  return v.template get<std::size_t>();
}

struct BlobEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t byte_length = 0;
};

struct ParsedManifest {
  Manifest manifest;
  std::vector<BlobEntry> entries;
};

ParsedManifest parse_manifest(const std::string& text) {
  ordered_json root;
  try {
    root = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("manifest is not valid JSON: ") + e.what());
  }
  ParsedManifest parsed;
  try {
    if (root.value("format_version", std::string{}) != kFormatVersion) {
      fail(ErrorCode::format, "manifest format_version must be \"" + std::string(kFormatVersion) + "\"");
    }
    auto& m = parsed.manifest;
    m.input_shape = root.at("input_shape").get<Shape>();
    m.feature_layer = root.at("feature_layer").get<std::string>();
    m.class_labels = root.value("class_labels", std::vector<std::string>{});
    for (const auto& jl : root.at("layers")) {
      LayerSpec layer;
      layer.name = jl.at("name").get<std::string>();
      layer.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      layer.filters = get_size(jl, "filters", 0);
      if (jl.contains("kernel")) {
        const auto kernel = jl.at("kernel").get<std::vector<std::size_t>>();
        if (kernel.size() != 2) fail(ErrorCode::format, "conv2d kernel must list two extents");
        layer.kernel_h = kernel[0];
        layer.kernel_w = kernel[1];
      }
      layer.stride = get_size(jl, "stride", 1);
      layer.pool = get_size(jl, "pool", 0);
      layer.units = get_size(jl, "units", 0);
      layer.epsilon = jl.value("epsilon", 1e-3);
      layer.rate = jl.value("rate", 0.0);
      layer.padding = padding_from_string(jl.value("padding", std::string("valid")));
      if (layer.kind == LayerKind::maxpool2d && layer.padding != Padding::valid) {
        fail(ErrorCode::format, "maxpool2d supports valid padding only");
      }
      for (const auto& jw : jl.value("weights", ordered_json::array())) {
        WeightRef ref{jw.at("name").get<std::string>(), jw.at("shape").get<Shape>(),
                      jw.value("trainable", true)};
        parsed.entries.push_back({ref.name, get_size(jw, "offset", 0), get_size(jw, "byte_length", 0)});
        layer.weights.push_back(std::move(ref));
      }
      m.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("malformed manifest: ") + e.what());
  }
  return parsed;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

std::optional<std::size_t> find_layer(const Manifest& manifest, std::string_view name) {
  for (std::size_t i = 0; i < manifest.layers.size(); ++i) {
    if (manifest.layers[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t feature_layer_index(const Manifest& manifest) {
  const auto index = find_layer(manifest, manifest.feature_layer);
  if (!index) fail(ErrorCode::unknown_layer, "feature layer '" + manifest.feature_layer + "' not in manifest");
  return *index;
}

bool has_classification_head(const Manifest& manifest) {
  return feature_layer_index(manifest) + 1 < manifest.layers.size();
}

std::vector<Shape> validate_manifest(const Manifest& manifest) {
  if (manifest.input_shape.empty()) fail(ErrorCode::format, "manifest input_shape is empty");
  for (auto extent : manifest.input_shape) {
    if (extent == 0) fail(ErrorCode::shape_mismatch, "input extents must be positive");
  }
  std::set<std::string> layer_names;
  std::set<std::string> weight_names;
  std::vector<Shape> shapes;
  Shape current = manifest.input_shape;
  for (const auto& layer : manifest.layers) {
    if (!layer_names.insert(layer.name).second) {
      fail(ErrorCode::format, "duplicate layer name '" + layer.name + "'");
    }
    const auto expected = expected_weights(layer, current);
    if (expected.size() != layer.weights.size()) {
      fail(ErrorCode::shape_mismatch, "layer '" + layer.name + "' declares " +
                                          std::to_string(layer.weights.size()) + " weights, expected " +
                                          std::to_string(expected.size()));
    }
    for (std::size_t k = 0; k < expected.size(); ++k) {
      const auto& w = layer.weights[k];
      if (!weight_names.insert(w.name).second) {
        fail(ErrorCode::format, "duplicate weight name '" + w.name + "'");
      }
      if (w.shape != expected[k].shape) {
        fail(ErrorCode::shape_mismatch, "weight '" + w.name + "' has shape " + shape_string(w.shape) +
                                            ", layer requires " + shape_string(expected[k].shape));
      }
      if (w.trainable != expected[k].trainable) {
        fail(ErrorCode::format, "weight '" + w.name + "' has the wrong trainable flag");
      }
    }
    current = infer_output_shape(layer, current);
    shapes.push_back(current);
  }
  if (!manifest.layers.empty() || !manifest.feature_layer.empty()) {
    check_head(manifest, feature_layer_index(manifest));
  }
  if (!manifest.class_labels.empty() && has_classification_head(manifest) &&
      manifest.class_labels.size() != shapes.back().back()) {
    fail(ErrorCode::shape_mismatch, "class_labels lists " + std::to_string(manifest.class_labels.size()) +
                                        " classes but the head has " +
                                        std::to_string(shapes.back().back()));
  }
  return shapes;
}

ParameterCount count_parameters(const Manifest& manifest) {
  validate_manifest(manifest);
  ParameterCount count;
  for (const auto& layer : manifest.layers) {
    for (const auto& w : layer.weights) {
      const auto n = element_count(w.shape);
      count.total += n;
      (w.trainable ? count.trainable : count.non_trainable) += n;
    }
  }
  return count;
}

ParameterCount count_parameters(const ModelBundle& bundle) { return count_parameters(bundle.manifest()); }

ModelBundle::ModelBundle(Manifest manifest, WeightStore weights)
    : manifest_(std::move(manifest)), weights_(std::move(weights)) {
  output_shapes_ = validate_manifest(manifest_);
  std::size_t referenced = 0;
  for (const auto& layer : manifest_.layers) {
    for (const auto& w : layer.weights) {
      const auto it = weights_.find(w.name);
      if (it == weights_.end()) fail(ErrorCode::unknown_weight, "weight '" + w.name + "' is missing");
      if (it->second.shape() != w.shape) {
        fail(ErrorCode::shape_mismatch, "weight '" + w.name + "' stored with shape " +
                                            shape_string(it->second.shape()) + ", manifest declares " +
                                            shape_string(w.shape));
      }
      ++referenced;
    }
  }
  if (referenced != weights_.size()) {
    fail(ErrorCode::format, "weight store holds tensors the manifest does not reference");
  }
  if (!manifest_.layers.empty()) {
    feature_index_ = feature_layer_index(manifest_);
    has_head_ = feature_index_ + 1 < manifest_.layers.size();
  }
}

ModelBundle ModelBundle::zeros(Manifest manifest) {
  WeightStore weights;
  for (const auto& layer : manifest.layers) {
    for (const auto& w : layer.weights) weights.emplace(w.name, Tensor(w.shape));
  }
  return ModelBundle(std::move(manifest), std::move(weights));
}

const Tensor& ModelBundle::weight(const std::string& name) const {
  const auto it = weights_.find(name);
  if (it == weights_.end()) fail(ErrorCode::unknown_weight, "unknown weight '" + name + "'");
  return it->second;
}

std::size_t ModelBundle::feature_width() const {
  if (manifest_.layers.empty()) return element_count(manifest_.input_shape);
  return element_count(output_shapes_.at(feature_index_));
}

std::size_t ModelBundle::class_count() const {
  return has_head_ ? output_shapes_.back().back() : 0;
}

std::string manifest_to_json(const Manifest& manifest) {
  ordered_json root;
  root["format_version"] = kFormatVersion;
  root["input_shape"] = manifest.input_shape;
  ordered_json layers = ordered_json::array();
  std::size_t offset = kBlobMagic.size();
  for (const auto& layer : manifest.layers) layers.push_back(layer_to_json(layer, offset));
  root["layers"] = std::move(layers);
  root["feature_layer"] = manifest.feature_layer;
  root["class_labels"] = manifest.class_labels;
  return root.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) { return parse_manifest(text).manifest; }

Manifest load_manifest(const std::filesystem::path& manifest_path) {
  auto manifest = manifest_from_json(read_file(manifest_path));
  validate_manifest(manifest);
  return manifest;
}

std::filesystem::path default_blob_path(const std::filesystem::path& manifest_path) {
  auto blob = manifest_path;
  blob.replace_extension(".psxb");
  return blob;
}

void save_model(const ModelBundle& bundle, const std::filesystem::path& manifest_path,
                const std::filesystem::path& blob_path) {
  {
    std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + manifest_path.string());
    out << manifest_to_json(bundle.manifest());
    if (!out) fail(ErrorCode::io, "failed writing " + manifest_path.string());
  }
  std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + blob_path.string());
  out.write(kBlobMagic.data(), static_cast<std::streamsize>(kBlobMagic.size()));
  std::vector<char> buffer;
  for (const auto& layer : bundle.manifest().layers) {
    for (const auto& w : layer.weights) {
      const auto values = bundle.weight(w.name).values();
      buffer.resize(values.size() * sizeof(float));
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto word = to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
        std::memcpy(buffer.data() + i * sizeof(float), &word, sizeof(word));
      }
      out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    }
  }
  if (!out) fail(ErrorCode::io, "failed writing " + blob_path.string());
}

ModelBundle load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path) {
  auto parsed = parse_manifest(read_file(manifest_path));
  validate_manifest(parsed.manifest);
  const std::string blob = read_file(blob_path);
  if (blob.size() < kBlobMagic.size() || std::string_view(blob).substr(0, kBlobMagic.size()) != kBlobMagic) {
    fail(ErrorCode::format, "blob " + blob_path.string() + " does not start with magic PSXBLOB1");
  }
  ModelBundle::WeightStore weights;
  std::size_t entry_index = 0;
  std::size_t end_of_data = kBlobMagic.size();
  for (const auto& layer : parsed.manifest.layers) {
    for (const auto& w : layer.weights) {
      const auto& entry = parsed.entries.at(entry_index++);
      const std::size_t count = element_count(w.shape);
      if (entry.byte_length != count * sizeof(float)) {
        fail(ErrorCode::shape_mismatch, "weight '" + w.name + "' byte_length " +
                                            std::to_string(entry.byte_length) + " does not match shape " +
                                            shape_string(w.shape));
      }
      if (entry.offset < kBlobMagic.size()) {
        fail(ErrorCode::format, "weight '" + w.name + "' offset overlaps the blob magic");
      }
      if (entry.offset + entry.byte_length > blob.size()) {
        fail(ErrorCode::truncated, "blob is truncated: weight '" + w.name + "' needs bytes up to " +
                                       std::to_string(entry.offset + entry.byte_length) + ", file has " +
                                       std::to_string(blob.size()));
      }
      std::vector<float> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t word;
        std::memcpy(&word, blob.data() + entry.offset + i * sizeof(float), sizeof(word));
        values[i] = std::bit_cast<float>(to_little_endian(word));
      }
      if (!weights.emplace(w.name, Tensor(w.shape, std::move(values))).second) {
        fail(ErrorCode::format, "duplicate weight name '" + w.name + "'");
      }
      end_of_data = std::max(end_of_data, entry.offset + entry.byte_length);
    }
  }
  if (end_of_data != blob.size()) {
    fail(ErrorCode::format, "blob has " + std::to_string(blob.size() - end_of_data) +
                                " trailing bytes not referenced by the manifest");
  }
  return ModelBundle(std::move(parsed.manifest), std::move(weights));
}

ModelBuilder::ModelBuilder(Shape input_shape) : shape_(std::move(input_shape)) {
  manifest_.input_shape = shape_;
}

ModelBuilder& ModelBuilder::add(LayerSpec layer) {
  layer.weights = expected_weights(layer, shape_);
  shape_ = infer_output_shape(layer, shape_);
  manifest_.layers.push_back(std::move(layer));
  return *this;
}

ModelBuilder& ModelBuilder::conv2d(std::string name, std::size_t filters, std::size_t kernel,
                                   Padding padding, std::size_t stride) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::conv2d;
  layer.filters = filters;
  layer.kernel_h = kernel;
  layer.kernel_w = kernel;
  layer.stride = stride;
  layer.padding = padding;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::maxpool2d(std::string name, std::size_t pool) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::maxpool2d;
  layer.pool = pool;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::dense(std::string name, std::size_t units) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::dense;
  layer.units = units;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::relu(std::string name) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::relu;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::batchnorm(std::string name, double epsilon) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::batchnorm;
  layer.epsilon = epsilon;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::dropout(std::string name, double rate) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::dropout;
  layer.rate = rate;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::flatten(std::string name) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::flatten;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::softmax(std::string name) {
  LayerSpec layer;
  layer.name = std::move(name);
  layer.kind = LayerKind::softmax;
  return add(std::move(layer));
}

ModelBuilder& ModelBuilder::mark_feature() {
  if (manifest_.layers.empty()) fail(ErrorCode::invalid_argument, "no layer to mark as feature layer");
  manifest_.feature_layer = manifest_.layers.back().name;
  return *this;
}

ModelBuilder& ModelBuilder::labels(std::vector<std::string> class_labels) {
  manifest_.class_labels = std::move(class_labels);
  return *this;
}

Manifest ModelBuilder::build() const {
  validate_manifest(manifest_);
  return manifest_;
}

std::vector<std::string> digit_labels() {
  std::vector<std::string> labels;
  for (int d = 0; d < 10; ++d) labels.push_back(std::to_string(d));
  return labels;
}

}  // namespace psx
