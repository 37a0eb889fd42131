#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psx/tensor.hpp"

namespace psx {

enum class LayerKind { conv2d, maxpool2d, dense, relu, batchnorm, dropout, flatten, softmax };
enum class Padding { valid, same };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view text);
std::string_view to_string(Padding padding);
Padding padding_from_string(std::string_view text);

/// Reference from a layer into the model's weight store.
struct WeightRef {
  std::string name;
  Shape shape;
  bool trainable = true;

  friend bool operator==(const WeightRef&, const WeightRef&) = default;
};

/// One row of a layer manifest. Only the hyperparameters relevant to `kind`
/// are meaningful; `validate` rejects inconsistent combinations.
///
/// Weight conventions (channels-last):
///   conv2d     kernel (kh, kw, in_channels, filters), bias (filters)
///   dense      kernel (inputs, units), bias (units)
///   batchnorm  gamma, beta (trainable), moving_mean, moving_variance (not trainable), each (channels)
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::flatten;
  std::size_t filters = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pool = 0;
  std::size_t units = 0;
  double epsilon = 1e-3;
  double rate = 0.0;
  Padding padding = Padding::valid;
  std::vector<WeightRef> weights;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Checks the hyperparameters against the kind and the given input shape and
/// returns the output shape.
Shape infer_output_shape(const LayerSpec& layer, const Shape& input);

/// Weight references `layer` needs for the given input shape. Names are
/// derived from the layer name ("<layer>/kernel", "<layer>/bias", ...).
std::vector<WeightRef> expected_weights(const LayerSpec& layer, const Shape& input);

}  // namespace psx
