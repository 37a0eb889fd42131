#pragma once

#include <cstdint>
#include <filesystem>

#include "psx/dataset.hpp"
#include "psx/trainer.hpp"

namespace psx {

/// The desk-scale MNIST fixture: reduced CNN on a seeded 2,000 / 1,000 split.
struct FixtureConfig {
  std::size_t train_count = 2000;
  std::size_t test_count = 1000;
  std::uint64_t seed = 1;
  TrainConfig train;

  FixtureConfig();
};

struct Fixture {
  ModelBundle model;
  DatasetSplit split;
  std::vector<double> epoch_loss;
  double test_accuracy = 0.0;
};

Fixture train_fixture(const LabeledDataset& data, const FixtureConfig& config = {},
                      const TrainProgress& progress = {});

}  // namespace psx
