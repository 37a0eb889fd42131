#include "psx/fixture.hpp"

#include "psx/architectures.hpp"

namespace psx {

FixtureConfig::FixtureConfig() {
  train.optimizer = OptimizerKind::adam;
  train.learning_rate = 1e-3;
  train.batch_size = 32;
  train.epochs = 10;
  train.dropout = true;
}

Fixture train_fixture(const LabeledDataset& data, const FixtureConfig& config, const TrainProgress& progress) {
  auto split = split_dataset(data, config.train_count, config.test_count, config.seed);
  TrainConfig train_config = config.train;
  train_config.seed = config.seed;
  auto result = train(initialize_model(architectures::reduced_mnist_cnn(), config.seed), split.first, train_config,
                      progress);
  const double accuracy = evaluate_accuracy(result.model, split.second);
  return {std::move(result.model), std::move(split), std::move(result.epoch_loss), accuracy};
}

}  // namespace psx
