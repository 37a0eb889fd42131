#include "psx/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "psx/classifier.hpp"
#include "psx/network.hpp"
#include "psx/rng.hpp"

namespace psx {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) fail(ErrorCode::invalid_argument, "learning rate must be positive");
  if (batch_size == 0) fail(ErrorCode::invalid_argument, "batch size must be >= 1");
  if (optimizer == OptimizerKind::adam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      fail(ErrorCode::invalid_argument, "ADAM betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) fail(ErrorCode::invalid_argument, "ADAM epsilon must be positive");
  }
}

namespace {

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
};

}  // namespace

TrainResult train(const ModelBundle& initial, const LabeledDataset& dataset, const TrainConfig& config,
                  const TrainProgress& progress) {
  config.validate();
  const Manifest& manifest = initial.manifest();
  for (const auto& layer : manifest.layers) {
    if (layer.kind == LayerKind::batchnorm) {
      fail(ErrorCode::unsupported, "training batchnorm layers is not supported ('" + layer.name + "')");
    }
  }
  if (!initial.has_head() || manifest.layers.back().kind != LayerKind::softmax) {
    fail(ErrorCode::unsupported, "training needs a model with a softmax classification head");
  }
  if (dataset.empty()) fail(ErrorCode::invalid_argument, "training dataset is empty");
  const std::size_t classes = initial.class_count();
  for (auto label : dataset.labels()) {
    if (label >= classes) {
      fail(ErrorCode::invalid_argument,
           "label " + std::to_string(label) + " out of range for " + std::to_string(classes) + " classes");
    }
  }

  Network<float> net(initial);
  const std::size_t logits_end = net.layer_count() - 1;
  std::vector<std::string> trainable;
  for (const auto& name : net.parameter_names()) {
    if (net.parameter_trainable(name)) trainable.push_back(name);
  }
  std::map<std::string, AdamState> adam;
  for (const auto& name : trainable) {
    const auto n = net.parameter(name).size();
    adam[name] = {std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)};
  }

  Rng order_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x5851f42d4c957f2dULL);
  const std::size_t batches = (dataset.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = batches * config.epochs;
  std::size_t step = 0;
  TrainResult result{initial, {}};

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = order_rng.permutation(dataset.size());
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(dataset.size(), begin + config.batch_size);
      ParameterGradients<float> grads;
      for (std::size_t k = begin; k < end; ++k) {
        const auto index = order[k];
        const auto tape = net.record(dataset.image(index), logits_end, config.dropout ? &dropout_rng : nullptr);
        const auto eval = cross_entropy_from_logits(tape.output(), CrossEntropyLoss{dataset.label(index)});
        if (!std::isfinite(eval.loss)) fail(ErrorCode::non_finite, "training loss diverged");
        epoch_loss += eval.loss;
        net.backward(tape, eval.logit_grad, logits_end, &grads);
      }
      const float inv_batch = 1.0f / static_cast<float>(end - begin);
      ++step;
      const auto lr = static_cast<float>(config.learning_rate);
      for (const auto& name : trainable) {
        auto weights = net.parameter(name).values();
        const auto g = grads.at(name).values();
        if (config.optimizer == OptimizerKind::sgd) {
          for (std::size_t i = 0; i < weights.size(); ++i) weights[i] -= lr * (g[i] * inv_batch);
        } else {
          auto& state = adam.at(name);
          const auto b1 = static_cast<float>(config.beta1);
          const auto b2 = static_cast<float>(config.beta2);
          const double t = static_cast<double>(step);
          const auto correction1 = static_cast<float>(1.0 - std::pow(config.beta1, t));
          const auto correction2 = static_cast<float>(1.0 - std::pow(config.beta2, t));
          const auto eps = static_cast<float>(config.epsilon);
          for (std::size_t i = 0; i < weights.size(); ++i) {
            const float gi = g[i] * inv_batch;
            state.m[i] = b1 * state.m[i] + (1.0f - b1) * gi;
            state.v[i] = b2 * state.v[i] + (1.0f - b2) * gi * gi;
            const float m_hat = state.m[i] / correction1;
            const float v_hat = state.v[i] / correction2;
            weights[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
          }
        }
        for (float w : weights) {
          if (!std::isfinite(w)) fail(ErrorCode::non_finite, "weight '" + name + "' diverged");
        }
      }
      if (progress) progress(step, total_steps);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }
  result.model = net.to_bundle();
  return result;
}

double evaluate_accuracy(const ModelBundle& bundle, const LabeledDataset& dataset) {
  if (dataset.empty()) return 0.0;
  const auto model = split_model(bundle);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (predict(model, dataset.image(i)).class_index == dataset.label(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

ModelBundle initialize_model(const Manifest& manifest, std::uint64_t seed) {
  validate_manifest(manifest);
  Rng rng(seed);
  ModelBundle::WeightStore weights;
  for (const auto& layer : manifest.layers) {
    for (const auto& w : layer.weights) {
      Tensor t(w.shape);
      const bool is_kernel = w.shape.size() >= 2;
      if (is_kernel) {
        // fan_in = receptive field * inputs, fan_out = receptive field * outputs
        std::size_t receptive = 1;
        for (std::size_t d = 0; d + 2 < w.shape.size(); ++d) receptive *= w.shape[d];
        const double fan_in = static_cast<double>(receptive * w.shape[w.shape.size() - 2]);
        const double fan_out = static_cast<double>(receptive * w.shape.back());
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.values()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * limit);
      } else if (w.name.ends_with("/gamma") || w.name.ends_with("/moving_variance")) {
        for (auto& v : t.values()) v = 1.0f;
      }
      weights.emplace(w.name, std::move(t));
    }
  }
  return ModelBundle(manifest, std::move(weights));
}

std::string loss_history_csv(const std::vector<double>& epoch_loss) {
  std::ostringstream out;
  out << "epoch,loss\n" << std::setprecision(9);
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) out << e + 1 << ',' << epoch_loss[e] << '\n';
  return out.str();
}

}  // namespace psx
