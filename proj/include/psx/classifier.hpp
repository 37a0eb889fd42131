#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "psx/model.hpp"
#include "psx/network.hpp"

namespace psx {

/// f(x): maps an input image to its K-wide feature vector.
class FeatureExtractor {
 public:
  using Function = std::function<Tensor(const Tensor&)>;

  FeatureExtractor(Function function, Shape input_shape, std::size_t width);

  /// Runs `network` up to and including its feature layer.
  static FeatureExtractor from_network(std::shared_ptr<const Network<float>> network);
  /// f(x) = flatten(x).
  static FeatureExtractor identity(Shape input_shape);

  /// Rank-1 feature vector of length width(); throws on non-finite output.
  Tensor operator()(const Tensor& x) const;

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t width() const noexcept { return width_; }

 private:
  Function function_;
  Shape input_shape_;
  std::size_t width_;
};

/// Per-class weight vectors w^c and biases b^c of the dense classification
/// layer. `weights` is row-major (K, C).
struct ClassHead {
  std::size_t feature_width = 0;
  std::size_t class_count = 0;
  std::vector<float> weights;
  std::vector<float> biases;
  bool few_shot = false;

  /// w^c as a K-vector.
  std::vector<float> class_weights(std::size_t c) const;
  float bias(std::size_t c) const { return biases.at(c); }

  /// All-ones weights and zero biases, for headless metric networks.
  static ClassHead ones(std::size_t feature_width, std::size_t class_count = 1);
};

struct SplitModel {
  FeatureExtractor features;
  ClassHead head;
  /// Full network the parts came from; null for hand-built extractors.
  std::shared_ptr<const Network<float>> network;
};

/// For headless models the head is `ClassHead::ones` with one class per label
/// (at least one).
SplitModel split_model(const ModelBundle& bundle);
SplitModel split_model(std::shared_ptr<const Network<float>> network);

struct Prediction {
  std::size_t class_index = 0;
  std::vector<double> probabilities;
};

/// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);
std::size_t argmax(std::span<const float> values);

/// softmax(b^c + f(x)^T w^c) evaluated through the split parts.
Prediction predict(const SplitModel& model, const Tensor& x);
Prediction predict(const ModelBundle& bundle, const Tensor& x);

}  // namespace psx
