#include "psx/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace psx {

FeatureExtractor::FeatureExtractor(Function function, Shape input_shape, std::size_t width)
    : function_(std::move(function)), input_shape_(std::move(input_shape)), width_(width) {
  if (!function_) fail(ErrorCode::invalid_argument, "feature extractor needs a callable");
}

FeatureExtractor FeatureExtractor::from_network(std::shared_ptr<const Network<float>> network) {
  const std::size_t end = network->layer_count() == 0 ? 0 : network->feature_index() + 1;
  const Shape input = network->manifest().input_shape;
  const std::size_t width = end == 0 ? element_count(input) : element_count(network->output_shapes()[end - 1]);
  return FeatureExtractor(
      [network = std::move(network), end, width](const Tensor& x) {
        auto f = network->forward(x, end);
        return f.rank() == 1 ? f : f.reshaped({width});
      },
      input, width);
}

FeatureExtractor FeatureExtractor::identity(Shape input_shape) {
  const std::size_t width = element_count(input_shape);
  return FeatureExtractor([width](const Tensor& x) { return x.reshaped({width}); }, std::move(input_shape),
                          width);
}

Tensor FeatureExtractor::operator()(const Tensor& x) const {
  if (x.shape() != input_shape_) {
    fail(ErrorCode::shape_mismatch, "feature extractor expects " + shape_string(input_shape_) + ", got " +
                                        shape_string(x.shape()));
  }
  Tensor f = function_(x);
  if (f.rank() != 1 || f.size() != width_) {
    fail(ErrorCode::shape_mismatch, "feature extractor returned " + shape_string(f.shape()) + ", expected (" +
                                        std::to_string(width_) + ")");
  }
  if (!f.all_finite()) fail(ErrorCode::non_finite, "feature vector contains non-finite values");
  return f;
}

std::vector<float> ClassHead::class_weights(std::size_t c) const {
  if (c >= class_count) {
    fail(ErrorCode::invalid_argument,
         "class " + std::to_string(c) + " out of range for " + std::to_string(class_count) + " classes");
  }
  std::vector<float> w(feature_width);
  for (std::size_t k = 0; k < feature_width; ++k) w[k] = weights[k * class_count + c];
  return w;
}

ClassHead ClassHead::ones(std::size_t feature_width, std::size_t class_count) {
  ClassHead head;
  head.feature_width = feature_width;
  head.class_count = class_count;
  head.weights.assign(feature_width * class_count, 1.0f);
  head.biases.assign(class_count, 0.0f);
  head.few_shot = true;
  return head;
}

SplitModel split_model(std::shared_ptr<const Network<float>> network) {
  const Manifest& manifest = network->manifest();
  auto features = FeatureExtractor::from_network(network);
  if (manifest.layers.empty() || !has_classification_head(manifest)) {
    const std::size_t classes = std::max<std::size_t>(1, manifest.class_labels.size());
    auto head = ClassHead::ones(features.width(), classes);
    return {std::move(features), std::move(head), std::move(network)};
  }
  const LayerSpec* dense = nullptr;
  for (std::size_t i = network->feature_index() + 1; i < manifest.layers.size(); ++i) {
    if (manifest.layers[i].kind == LayerKind::dense) dense = &manifest.layers[i];
  }
  if (!dense || manifest.layers.back().kind != LayerKind::softmax) {
    fail(ErrorCode::unsupported, "classification head must be dense + softmax");
  }
  ClassHead head;
  head.feature_width = features.width();
  head.class_count = dense->units;
  const auto& kernel = network->parameter(dense->weights[0].name);
  const auto& bias = network->parameter(dense->weights[1].name);
  head.weights = kernel.storage();
  head.biases = bias.storage();
  return {std::move(features), std::move(head), std::move(network)};
}

SplitModel split_model(const ModelBundle& bundle) {
  return split_model(std::make_shared<const Network<float>>(bundle));
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::invalid_argument, "argmax of an empty range");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t argmax(std::span<const float> values) {
  if (values.empty()) fail(ErrorCode::invalid_argument, "argmax of an empty range");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

Prediction predict(const SplitModel& model, const Tensor& x) {
  const Tensor f = model.features(x);
  const ClassHead& head = model.head;
  if (head.few_shot) fail(ErrorCode::unsupported, "prediction needs a trained classification head");
  std::vector<double> logits(head.class_count);
  for (std::size_t c = 0; c < head.class_count; ++c) {
    double z = head.biases[c];
    for (std::size_t k = 0; k < head.feature_width; ++k) {
      z += static_cast<double>(f[k]) * head.weights[k * head.class_count + c];
    }
    logits[c] = z;
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  Prediction prediction;
  prediction.probabilities.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) sum += (prediction.probabilities[c] = std::exp(logits[c] - peak));
  for (auto& p : prediction.probabilities) p /= sum;
  prediction.class_index = argmax(std::span<const double>(logits));
  return prediction;
}

Prediction predict(const ModelBundle& bundle, const Tensor& x) { return predict(split_model(bundle), x); }

}  // namespace psx
