#include "psx/architectures.hpp"

namespace psx::architectures {

Manifest mnist_cnn() {
  return ModelBuilder({28, 28, 1})
      .conv2d("conv1", 32, 3, Padding::valid)
      .relu("conv1_relu")
      .conv2d("conv2", 64, 3, Padding::valid)
      .relu("conv2_relu")
      .maxpool2d("pool", 2)
      .dropout("dropout1", 0.25)
      .flatten("flatten")
      .dense("feature", 128)
      .relu("feature_relu")
      .mark_feature()
      .dropout("dropout2", 0.5)
      .dense("logits", 10)
      .softmax("softmax")
      .labels(digit_labels())
      .build();
}

Manifest omniglot_protonet() {
  ModelBuilder builder({28, 28, 1});
  for (int block = 1; block <= 4; ++block) {
    const auto prefix = "block" + std::to_string(block);
    builder.conv2d(prefix + "_conv", 64, 3, Padding::same)
        .batchnorm(prefix + "_bn")
        .relu(prefix + "_relu")
        .maxpool2d(prefix + "_pool", 2);
  }
  return builder.flatten("flatten").mark_feature().build();
}

Manifest vgg16() {
  ModelBuilder builder({224, 224, 3});
  const std::size_t widths[] = {64, 128, 256, 512, 512};
  const int depths[] = {2, 2, 3, 3, 3};
  for (int block = 0; block < 5; ++block) {
    for (int i = 1; i <= depths[block]; ++i) {
      const auto name = "block" + std::to_string(block + 1) + "_conv" + std::to_string(i);
      builder.conv2d(name, widths[block], 3, Padding::same).relu(name + "_relu");
    }
    builder.maxpool2d("block" + std::to_string(block + 1) + "_pool", 2);
  }
  std::vector<std::string> labels;
  for (int c = 0; c < 1000; ++c) labels.push_back("class_" + std::to_string(c));
  return builder.flatten("flatten")
      .dense("fc1", 4096)
      .relu("fc1_relu")
      .dense("fc2", 4096)
      .relu("fc2_relu")
      .mark_feature()
      .dense("predictions", 1000)
      .softmax("softmax")
      .labels(std::move(labels))
      .build();
}

Manifest reduced_mnist_cnn() {
  return ModelBuilder({28, 28, 1})
      .conv2d("conv1", 16, 3, Padding::valid)
      .relu("conv1_relu")
      .conv2d("conv2", 32, 3, Padding::valid)
      .relu("conv2_relu")
      .maxpool2d("pool", 2)
      .dropout("dropout1", 0.25)
      .flatten("flatten")
      .dense("feature", 64)
      .relu("feature_relu")
      .mark_feature()
      .dropout("dropout2", 0.5)
      .dense("logits", 10)
      .softmax("softmax")
      .labels(digit_labels())
      .build();
}

}  // namespace psx::architectures
