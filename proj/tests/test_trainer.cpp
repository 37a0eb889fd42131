#include <cmath>

#include "doctest.h"
#include "psx/architectures.hpp"
#include "psx/classifier.hpp"
#include "psx/trainer.hpp"
#include "test_support.hpp"

using namespace psx;
using psx::testing::max_relative_error;
using psx::testing::random_bundle;
using psx::testing::random_tensor;

namespace {

// Checks every trainable weight gradient of the cross-entropy loss against
// central differences, in double precision.
void check_weight_gradients(const ModelBundle& bundle, std::uint64_t seed) {
  Network<double> net(bundle);
  const auto x = random_tensor<double>(bundle.manifest().input_shape, seed, 0, 1);
  const CrossEntropyLoss loss{1};
  const std::size_t logits_end = net.layer_count() - 1;
  const auto tape = net.record(x, logits_end);
  const auto eval = cross_entropy_from_logits(tape.output(), loss);
  ParameterGradients<double> grads;
  net.backward(tape, eval.logit_grad, logits_end, &grads);

  for (const auto& name : net.parameter_names()) {
    if (!net.parameter_trainable(name)) continue;
    CAPTURE(name);
    REQUIRE(grads.contains(name));
    auto& w = net.parameter(name);
    TensorD numeric(w.shape());
    const double h = 1e-6;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = cross_entropy_loss(net, x, loss);
      w[i] = saved - h;
      const double down = cross_entropy_loss(net, x, loss);
      w[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    CHECK(max_relative_error(grads.at(name), numeric) < 1e-4);
  }
}

Manifest tiny_classifier(std::size_t inputs, std::size_t hidden, std::size_t classes) {
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.push_back("c" + std::to_string(c));
  return ModelBuilder({inputs})
      .dense("hidden", hidden)
      .relu("hidden_relu")
      .mark_feature()
      .dense("logits", classes)
      .softmax("softmax")
      .labels(labels)
      .build();
}

LabeledDataset gaussian_blobs(std::size_t per_class, std::uint64_t seed) {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      auto x = random_tensor<float>({4}, seed + c * 100 + i, -0.3, 0.3);
      x[c] += 1.0f;
      images.push_back(x);
      labels.push_back(c);
    }
  }
  return LabeledDataset(std::move(images), std::move(labels));
}

}  // namespace

TEST_CASE("weight gradients match finite differences for dense and conv layers") {
  const auto manifest = ModelBuilder({6, 6, 2})
                            .conv2d("conv_valid", 3, 3, Padding::valid)
                            .relu("r1")
                            .conv2d("conv_same", 2, 2, Padding::same, 2)
                            .maxpool2d("pool", 2)
                            .flatten("flat")
                            .dense("hidden", 5)
                            .relu("hidden_relu")
                            .mark_feature()
                            .dropout("drop", 0.5)
                            .dense("logits", 3)
                            .softmax("softmax")
                            .build();
  for (std::uint64_t seed : {1u, 2u, 3u}) check_weight_gradients(random_bundle(manifest, seed), seed + 10);
}

TEST_CASE("batchnorm gamma and beta gradients match finite differences") {
  const auto manifest = ModelBuilder({4, 4, 2})
                            .conv2d("conv", 3, 3, Padding::same)
                            .batchnorm("bn")
                            .relu("relu")
                            .flatten("flat")
                            .mark_feature()
                            .dense("logits", 3)
                            .softmax("softmax")
                            .build();
  check_weight_gradients(random_bundle(manifest, 4), 5);
}

TEST_CASE("weight gradients of the reduced MNIST CNN match finite differences") {
  const auto manifest = architectures::reduced_mnist_cnn();
  Network<double> net(random_bundle(manifest, 6, 0.1));
  const auto x = random_tensor<double>(manifest.input_shape, 7, 0, 1);
  const CrossEntropyLoss loss{3};
  const std::size_t logits_end = net.layer_count() - 1;
  const auto tape = net.record(x, logits_end);
  ParameterGradients<double> grads;
  net.backward(tape, cross_entropy_from_logits(tape.output(), loss).logit_grad, logits_end, &grads);
  // spot-check a spread of coordinates in every weight tensor
  for (const auto& name : net.parameter_names()) {
    CAPTURE(name);
    auto& w = net.parameter(name);
    const std::size_t stride = std::max<std::size_t>(1, w.size() / 7);
    for (std::size_t i = 0; i < w.size(); i += stride) {
      const double saved = w[i], h = 1e-6;
      w[i] = saved + h;
      const double up = cross_entropy_loss(net, x, loss);
      w[i] = saved - h;
      const double down = cross_entropy_loss(net, x, loss);
      w[i] = saved;
      const double numeric = (up - down) / (2 * h);
      if (std::abs(numeric) > 1e-6) CHECK(std::abs(grads.at(name)[i] - numeric) / std::abs(numeric) < 1e-4);
    }
  }
}

TEST_CASE("one SGD step moves each weight by exactly -lr * mean gradient") {
  const auto manifest = tiny_classifier(4, 6, 3);
  const auto initial = initialize_model(manifest, 11);
  const auto data = gaussian_blobs(2, 12);

  Network<float> net(initial);
  const std::size_t logits_end = net.layer_count() - 1;
  ParameterGradients<float> grads;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto tape = net.record(data.image(i), logits_end);
    net.backward(tape, cross_entropy_from_logits(tape.output(), CrossEntropyLoss{data.label(i)}).logit_grad,
                 logits_end, &grads);
  }

  TrainConfig config;
  config.optimizer = OptimizerKind::sgd;
  config.learning_rate = 0.05;
  config.batch_size = data.size();
  config.epochs = 1;
  config.dropout = false;
  const auto trained = train(initial, data, config).model;
  const float inv = 1.0f / static_cast<float>(data.size());
  for (const auto& [name, before] : initial.weights()) {
    const auto& after = trained.weight(name);
    for (std::size_t i = 0; i < before.size(); ++i) {
      const float expected = before[i] - 0.05f * (grads.at(name)[i] * inv);
      CHECK(after[i] == doctest::Approx(expected).epsilon(1e-6));
    }
  }
}

TEST_CASE("training is bitwise reproducible per seed") {
  const auto manifest = tiny_classifier(4, 8, 3);
  const auto data = gaussian_blobs(10, 20);
  TrainConfig config;
  config.learning_rate = 1e-2;
  config.batch_size = 4;
  config.epochs = 3;
  config.seed = 5;
  const auto initial = initialize_model(manifest, 3);
  const auto a = train(initial, data, config);
  const auto b = train(initial, data, config);
  CHECK(a.model == b.model);
  CHECK(a.epoch_loss == b.epoch_loss);
  config.seed = 6;
  CHECK_FALSE(train(initial, data, config).model == a.model);
  CHECK(initialize_model(manifest, 3) == initial);
}

TEST_CASE("a single sample is memorized") {
  const auto manifest = tiny_classifier(4, 16, 3);
  const LabeledDataset one({Tensor({4}, {0.2f, -0.4f, 0.9f, 0.1f})}, {2});
  TrainConfig config;
  config.learning_rate = 1e-2;
  config.batch_size = 1;
  config.epochs = 300;
  config.dropout = false;
  const auto result = train(initialize_model(manifest, 8), one, config);
  CHECK(result.epoch_loss.back() < 1e-3);
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
  CHECK(evaluate_accuracy(result.model, one) == 1.0);
}

TEST_CASE("separable blobs are learned by SGD and ADAM") {
  const auto data = gaussian_blobs(30, 40);
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    TrainConfig config;
    config.optimizer = kind;
    config.learning_rate = kind == OptimizerKind::sgd ? 0.1 : 0.01;
    config.batch_size = 8;
    config.epochs = 30;
    const auto result = train(initialize_model(tiny_classifier(4, 8, 3), 9), data, config);
    CHECK(evaluate_accuracy(result.model, data) >= 0.95);
    CHECK(result.epoch_loss.back() < result.epoch_loss.front());
  }
}

TEST_CASE("constant logits predict class 0, so accuracy is the class-0 frequency") {
  const auto manifest = tiny_classifier(4, 3, 3);
  const auto bundle = ModelBundle::zeros(manifest);
  const LabeledDataset data({Tensor({4}, 0.1f), Tensor({4}, 0.2f), Tensor({4}, 0.3f), Tensor({4}, 0.4f),
                             Tensor({4}, 0.5f)},
                            {0, 1, 0, 2, 2});
  CHECK(evaluate_accuracy(bundle, data) == doctest::Approx(0.4));
}

TEST_CASE("training rejects batchnorm, bad labels and bad configs") {
  const auto bn = ModelBuilder({2, 2, 1})
                      .conv2d("conv", 1, 1, Padding::valid)
                      .batchnorm("bn")
                      .flatten("flat")
                      .mark_feature()
                      .dense("logits", 2)
                      .softmax("softmax")
                      .build();
  const LabeledDataset images({Tensor({2, 2, 1})}, {0});
  CHECK_THROWS_AS(train(initialize_model(bn, 1), images, TrainConfig{}), Error);

  const auto manifest = tiny_classifier(4, 3, 3);
  const LabeledDataset bad_label({Tensor({4})}, {3});
  CHECK_THROWS_AS(train(initialize_model(manifest, 1), bad_label, TrainConfig{}), Error);

  TrainConfig zero_lr;
  zero_lr.learning_rate = 0;
  CHECK_THROWS_AS(zero_lr.validate(), Error);
  TrainConfig zero_batch;
  zero_batch.batch_size = 0;
  CHECK_THROWS_AS(zero_batch.validate(), Error);
  CHECK(TrainConfig{}.learning_rate == 6e-5);

  TrainConfig diverge;
  diverge.optimizer = OptimizerKind::sgd;
  diverge.learning_rate = 1e30;
  const LabeledDataset big({Tensor({4}, 1e10f)}, {1});
  CHECK_THROWS_AS(train(initialize_model(manifest, 1), big, diverge), Error);
}

TEST_CASE("progress reports every step and loss history renders as CSV") {
  const auto data = gaussian_blobs(3, 1);
  TrainConfig config;
  config.batch_size = 4;
  config.epochs = 2;
  std::vector<std::size_t> steps;
  const auto result = train(initialize_model(tiny_classifier(4, 3, 3), 2), data, config,
                            [&](std::size_t step, std::size_t total) {
                              CHECK(total == 6);
                              steps.push_back(step);
                            });
  CHECK(steps == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
  REQUIRE(result.epoch_loss.size() == 2);
  const auto csv = loss_history_csv({0.5, 0.25});
  CHECK(csv == "epoch,loss\n1,0.5\n2,0.25\n");
}
