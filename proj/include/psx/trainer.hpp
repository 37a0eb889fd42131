#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "psx/dataset.hpp"
#include "psx/model.hpp"

namespace psx {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  /// MNIST default for the full-size classifier.
  double learning_rate = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  bool dropout = true;

  void validate() const;
};

struct TrainResult {
  ModelBundle model;
  /// Mean cross-entropy per epoch.
  std::vector<double> epoch_loss;
};

/// Called after every optimizer step with (completed steps, total steps).
using TrainProgress = std::function<void(std::size_t, std::size_t)>;

/// Mini-batch training of every trainable weight. Deterministic for a given
/// seed: the shuffle order and dropout masks both come from it.
TrainResult train(const ModelBundle& initial, const LabeledDataset& dataset, const TrainConfig& config,
                  const TrainProgress& progress = {});

/// Fraction of samples whose predicted class equals the label.
double evaluate_accuracy(const ModelBundle& bundle, const LabeledDataset& dataset);

/// Glorot-uniform kernels, zero biases; batchnorm gets unit gamma and
/// variance, zero beta and mean.
ModelBundle initialize_model(const Manifest& manifest, std::uint64_t seed);

/// Loss history as "epoch,loss" CSV.
std::string loss_history_csv(const std::vector<double>& epoch_loss);

}  // namespace psx
