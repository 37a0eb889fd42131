#pragma once

#include "psx/model.hpp"

namespace psx::architectures {

/// Convolutional MNIST classifier: two 3x3 valid convolutions (32, 64),
/// 2x2 max pooling, dense-128 ReLU feature layer, dense-10 softmax head.
Manifest mnist_cnn();

/// Prototypical few-shot embedding: four blocks of 3x3 same convolution (64),
/// batchnorm, ReLU and 2x2 pooling, ending in a 64-wide flatten feature layer.
/// Headless.
Manifest omniglot_protonet();

/// VGG16 for 224x224x3 inputs; the second 4096-wide dense layer is the
/// feature layer. Intended for parameter arithmetic only.
Manifest vgg16();

/// Desk-scale variant of `mnist_cnn` used for the trained fixtures:
/// conv16 -> conv32 -> maxpool -> dense64 feature layer -> dense10 softmax.
Manifest reduced_mnist_cnn();

}  // namespace psx::architectures
