#include "psx/layers.hpp"

#include <array>
#include <utility>

namespace psx {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 8> kKindNames{{
    {LayerKind::conv2d, "conv2d"},
    {LayerKind::maxpool2d, "maxpool2d"},
    {LayerKind::dense, "dense"},
    {LayerKind::relu, "relu"},
    {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::dropout, "dropout"},
    {LayerKind::flatten, "flatten"},
    {LayerKind::softmax, "softmax"},
}};

[[noreturn]] void bad_layer(const LayerSpec& layer, const std::string& what) {
  fail(ErrorCode::invalid_argument, "layer '" + layer.name + "' (" +
                                        std::string(to_string(layer.kind)) + "): " + what);
}

void require_rank(const LayerSpec& layer, const Shape& input, std::size_t rank) {
  if (input.size() != rank) {
    fail(ErrorCode::shape_mismatch, "layer '" + layer.name + "' expects rank-" +
                                        std::to_string(rank) + " input, got " +
                                        shape_string(input));
  }
}

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (kernel > in) return 0;
  return (in - kernel) / stride + 1;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  fail(ErrorCode::format, "unknown layer kind '" + std::string(text) + "'");
}

std::string_view to_string(Padding padding) { return padding == Padding::same ? "same" : "valid"; }

Padding padding_from_string(std::string_view text) {
  if (text == "valid") return Padding::valid;
  if (text == "same") return Padding::same;
  fail(ErrorCode::format, "unknown padding '" + std::string(text) + "'");
}

Shape infer_output_shape(const LayerSpec& layer, const Shape& input) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      require_rank(layer, input, 3);
      if (layer.filters == 0 || layer.kernel_h == 0 || layer.kernel_w == 0 || layer.stride == 0) {
        bad_layer(layer, "filters, kernel extents and stride must be positive");
      }
      const auto h = conv_extent(input[0], layer.kernel_h, layer.stride, layer.padding);
      const auto w = conv_extent(input[1], layer.kernel_w, layer.stride, layer.padding);
      if (h == 0 || w == 0) {
        fail(ErrorCode::shape_mismatch, "layer '" + layer.name + "': kernel larger than input " +
                                            shape_string(input));
      }
      return {h, w, layer.filters};
    }
    case LayerKind::maxpool2d: {
      require_rank(layer, input, 3);
      if (layer.pool == 0) bad_layer(layer, "pool size must be >= 1");
      if (layer.pool > input[0] || layer.pool > input[1]) {
        fail(ErrorCode::shape_mismatch, "layer '" + layer.name + "': pool larger than input " +
                                            shape_string(input));
      }
      return {input[0] / layer.pool, input[1] / layer.pool, input[2]};
    }
    case LayerKind::dense:
      require_rank(layer, input, 1);
      if (layer.units == 0) bad_layer(layer, "unit count must be >= 1");
      return {layer.units};
    case LayerKind::batchnorm:
      if (input.empty()) bad_layer(layer, "needs at least rank-1 input");
      if (!(layer.epsilon > 0.0)) bad_layer(layer, "epsilon must be positive");
      return input;
    case LayerKind::dropout:
      if (!(layer.rate >= 0.0 && layer.rate < 1.0)) bad_layer(layer, "drop rate must be in [0, 1)");
      return input;
    case LayerKind::relu:
      return input;
    case LayerKind::softmax:
      if (input.empty()) bad_layer(layer, "needs at least rank-1 input");
      return input;
    case LayerKind::flatten:
      return {element_count(input)};
  }
  bad_layer(layer, "unhandled kind");
}

std::vector<WeightRef> expected_weights(const LayerSpec& layer, const Shape& input) {
  const auto& n = layer.name;
  switch (layer.kind) {
    case LayerKind::conv2d:
      return {{n + "/kernel", {layer.kernel_h, layer.kernel_w, input.at(2), layer.filters}, true},
              {n + "/bias", {layer.filters}, true}};
    case LayerKind::dense:
      return {{n + "/kernel", {input.at(0), layer.units}, true}, {n + "/bias", {layer.units}, true}};
    case LayerKind::batchnorm: {
      const Shape channels{input.back()};
      return {{n + "/gamma", channels, true},
              {n + "/beta", channels, true},
              {n + "/moving_mean", channels, false},
              {n + "/moving_variance", channels, false}};
    }
    default:
      return {};
  }
}

}  // namespace psx
