#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psx/model.hpp"
#include "psx/rng.hpp"
#include "psx/tensor.hpp"

namespace psx {

template <typename T>
class Network;

/// Forward intermediates kept for reverse-mode replay.
template <typename T>
class GradientTape {
 public:
  const BasicTensor<T>& input() const { return records_.front().input; }
  const BasicTensor<T>& output() const noexcept { return output_; }
  /// Number of layers evaluated.
  std::size_t depth() const noexcept { return records_.size(); }
  /// Output of layer `index` (the last recorded output for the final layer).
  const BasicTensor<T>& layer_output(std::size_t index) const;

 private:
  friend class Network<T>;

  struct Record {
    BasicTensor<T> input;
    std::vector<std::uint32_t> argmax;  // maxpool routing
    std::vector<T> mask;                // dropout scaling, training mode only
  };

  std::vector<Record> records_;
  BasicTensor<T> output_;
};

template <typename T>
using ParameterGradients = std::map<std::string, BasicTensor<T>>;

/// Precision-specific evaluator compiled from a ModelBundle. Holds its own
/// copy of the weights; const member functions are reentrant.
template <typename T>
class Network {
 public:
  explicit Network(const ModelBundle& bundle);

  const Manifest& manifest() const noexcept { return manifest_; }
  std::size_t layer_count() const noexcept { return manifest_.layers.size(); }
  const std::vector<Shape>& output_shapes() const noexcept { return output_shapes_; }
  std::size_t feature_index() const noexcept { return feature_index_; }
  std::size_t layer_index(std::string_view name) const;

  /// Runs layers [0, end) in inference mode. `end` defaults to all layers.
  BasicTensor<T> forward(const BasicTensor<T>& input, std::optional<std::size_t> end = {}) const;
  /// Runs up to and including `stop_layer`.
  BasicTensor<T> forward_until(const BasicTensor<T>& input, std::string_view stop_layer) const;

  /// Like forward, but keeps what `backward` needs. When `dropout_rng` is
  /// given dropout layers sample inverted-dropout masks from it.
  GradientTape<T> record(const BasicTensor<T>& input, std::optional<std::size_t> end = {},
                         Rng* dropout_rng = nullptr) const;

  /// Re-evaluates the recorded layers from the tape's input, reusing the
  /// recorded dropout masks.
  BasicTensor<T> replay(const GradientTape<T>& tape) const;

  /// Propagates `output_grad` (gradient w.r.t. the output of layer `end - 1`)
  /// back through layers [0, end) and returns the input gradient. Weight
  /// gradients are accumulated into `weight_grads` when non-null.
  BasicTensor<T> backward(const GradientTape<T>& tape, const BasicTensor<T>& output_grad,
                          std::optional<std::size_t> end = {},
                          ParameterGradients<T>* weight_grads = nullptr) const;

  const std::vector<std::string>& parameter_names() const noexcept { return param_names_; }
  const BasicTensor<T>& parameter(std::string_view name) const;
  BasicTensor<T>& parameter(std::string_view name);
  bool parameter_trainable(std::string_view name) const;

  /// Float copy of the current parameters under the original manifest.
  ModelBundle to_bundle() const;

 private:
  std::size_t param_slot(std::string_view name) const;
  void check_input(const BasicTensor<T>& input) const;
  std::size_t resolve_end(std::optional<std::size_t> end) const;
  BasicTensor<T> apply(std::size_t index, const BasicTensor<T>& input,
                       typename GradientTape<T>::Record* record, Rng* dropout_rng) const;

  Manifest manifest_;
  std::vector<Shape> output_shapes_;
  std::size_t feature_index_ = 0;
  std::vector<std::string> param_names_;
  std::vector<BasicTensor<T>> params_;
  std::vector<bool> trainable_;
  std::vector<std::vector<std::size_t>> layer_params_;
};

extern template class Network<float>;
extern template class Network<double>;

/// Categorical cross-entropy against `target` on a softmax-terminated model.
struct CrossEntropyLoss {
  std::size_t target = 0;
};

/// Loss value and the gradient w.r.t. the pre-softmax logits (p - onehot).
template <typename T>
struct LossEvaluation {
  double loss = 0.0;
  BasicTensor<T> probabilities;
  BasicTensor<T> logit_grad;
};

template <typename T>
LossEvaluation<T> cross_entropy_from_logits(const BasicTensor<T>& logits, const CrossEntropyLoss& loss);

/// dL/dx via tape replay. The model must end in a softmax layer.
template <typename T>
BasicTensor<T> input_gradient(const Network<T>& network, const BasicTensor<T>& input,
                              const CrossEntropyLoss& loss);

Tensor input_gradient(const ModelBundle& bundle, const Tensor& input, const CrossEntropyLoss& loss);

/// Central differences of an arbitrary scalar function of the input.
TensorD finite_difference_gradient(const std::function<double(const TensorD&)>& loss, const TensorD& input,
                                   double step);

/// Central differences of the cross-entropy loss per input element, in
/// double precision.
TensorD finite_difference_gradient(const ModelBundle& bundle, const TensorD& input,
                                   const CrossEntropyLoss& loss, double step);
TensorD finite_difference_gradient(const Network<double>& network, const TensorD& input,
                                   const CrossEntropyLoss& loss, double step);

/// Loss evaluated through a full forward pass; the model must end in softmax.
double cross_entropy_loss(const Network<double>& network, const TensorD& input,
                          const CrossEntropyLoss& loss);

}  // namespace psx
