#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psx/layers.hpp"
#include "psx/tensor.hpp"

namespace psx {

/// Ordered layer list plus the designated feature layer. Layers after the
/// feature layer form the classification head.
struct Manifest {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::string feature_layer;
  std::vector<std::string> class_labels;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

/// Per-layer output shapes after validating every layer, weight reference,
/// the feature layer designation and the head structure.
std::vector<Shape> validate_manifest(const Manifest& manifest);

std::optional<std::size_t> find_layer(const Manifest& manifest, std::string_view name);
std::size_t feature_layer_index(const Manifest& manifest);

/// True when the manifest has layers after its feature layer. A head is
/// optional dropout layers, one dense layer and a softmax.
bool has_classification_head(const Manifest& manifest);

struct ParameterCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;

  friend bool operator==(const ParameterCount&, const ParameterCount&) = default;
};

/// Works from declared weight shapes alone, so weights need not be present.
ParameterCount count_parameters(const Manifest& manifest);

class ModelBundle {
 public:
  using WeightStore = std::map<std::string, Tensor>;

  ModelBundle(Manifest manifest, WeightStore weights);

  /// All declared weights zero-filled.
  static ModelBundle zeros(Manifest manifest);

  const Manifest& manifest() const noexcept { return manifest_; }
  const WeightStore& weights() const noexcept { return weights_; }
  const Tensor& weight(const std::string& name) const;
  const std::vector<Shape>& layer_output_shapes() const noexcept { return output_shapes_; }

  std::size_t feature_index() const noexcept { return feature_index_; }
  std::size_t feature_width() const;
  bool has_head() const noexcept { return has_head_; }
  /// Number of class nodes C; 0 for a headless model.
  std::size_t class_count() const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;

 private:
  Manifest manifest_;
  WeightStore weights_;
  std::vector<Shape> output_shapes_;
  std::size_t feature_index_ = 0;
  bool has_head_ = false;
};

ParameterCount count_parameters(const ModelBundle& bundle);

// On-disk format: a JSON manifest ("psx1") and a binary blob that starts with
// the 8-byte magic "PSXBLOB1" followed by little-endian float32 weights at the
// offsets recorded in the manifest.
inline constexpr std::string_view kFormatVersion = "psx1";
inline constexpr std::string_view kBlobMagic = "PSXBLOB1";

std::string manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const std::string& text);

void save_model(const ModelBundle& bundle, const std::filesystem::path& manifest_path,
                const std::filesystem::path& blob_path);
ModelBundle load_model(const std::filesystem::path& manifest_path,
                       const std::filesystem::path& blob_path);
/// Manifest only, for arithmetic on architectures whose weights are absent.
Manifest load_manifest(const std::filesystem::path& manifest_path);

/// Default blob location next to a manifest: "<stem>.psxb".
std::filesystem::path default_blob_path(const std::filesystem::path& manifest_path);

/// Fluent manifest construction that tracks the running shape and derives
/// each layer's weight references.
class ModelBuilder {
 public:
  explicit ModelBuilder(Shape input_shape);

  ModelBuilder& conv2d(std::string name, std::size_t filters, std::size_t kernel, Padding padding,
                       std::size_t stride = 1);
  ModelBuilder& maxpool2d(std::string name, std::size_t pool);
  ModelBuilder& dense(std::string name, std::size_t units);
  ModelBuilder& relu(std::string name);
  ModelBuilder& batchnorm(std::string name, double epsilon = 1e-3);
  ModelBuilder& dropout(std::string name, double rate);
  ModelBuilder& flatten(std::string name);
  ModelBuilder& softmax(std::string name);
  ModelBuilder& add(LayerSpec layer);

  /// Designates the most recently added layer as the feature layer.
  ModelBuilder& mark_feature();
  ModelBuilder& labels(std::vector<std::string> class_labels);

  const Shape& current_shape() const noexcept { return shape_; }
  Manifest build() const;

 private:
  Manifest manifest_;
  Shape shape_;
};

std::vector<std::string> digit_labels();

}  // namespace psx
