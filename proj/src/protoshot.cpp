#include "psx/protoshot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "psx/parallel.hpp"

namespace psx {

std::vector<double> weighted_features(const Tensor& features, std::span<const float> class_weights) {
  if (features.size() != class_weights.size()) {
    fail(ErrorCode::shape_mismatch, "feature width " + std::to_string(features.size()) +
                                        " does not match class weight width " + std::to_string(class_weights.size()));
  }
  std::vector<double> out(features.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = static_cast<double>(features[k]) * static_cast<double>(class_weights[k]);
  }
  return out;
}

ScoreRecord cosine_score(std::span<const double> prototype, std::span<const double> weighted) {
  if (prototype.size() != weighted.size()) {
    fail(ErrorCode::shape_mismatch, "prototype width " + std::to_string(prototype.size()) +
                                        " does not match feature width " + std::to_string(weighted.size()));
  }
  double pp = 0.0, qq = 0.0;
  for (std::size_t k = 0; k < prototype.size(); ++k) {
    pp += prototype[k] * prototype[k];
    qq += weighted[k] * weighted[k];
  }
  ScoreRecord record;
  record.components.assign(prototype.size(), 0.0);
  const double norm = std::sqrt(pp) * std::sqrt(qq);
  if (!std::isfinite(norm)) fail(ErrorCode::non_finite, "non-finite feature norm");
  if (std::sqrt(pp) < kDegenerateNorm || std::sqrt(qq) < kDegenerateNorm) {
    record.degenerate = true;
    return record;
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < prototype.size(); ++k) {
    record.components[k] = prototype[k] * weighted[k] / norm;
    sum += record.components[k];
  }
  record.score = std::clamp(sum, -1.0, 1.0);
  return record;
}

namespace {

void check_head(const FeatureExtractor& features, const ClassHead& head, std::size_t class_index) {
  if (features.width() != head.feature_width) {
    fail(ErrorCode::shape_mismatch, "feature width " + std::to_string(features.width()) +
                                        " does not match class head width " + std::to_string(head.feature_width));
  }
  if (class_index >= head.class_count) {
    fail(ErrorCode::invalid_argument, "class " + std::to_string(class_index) + " out of range for " +
                                          std::to_string(head.class_count) + " classes");
  }
}

}  // namespace

Prototype compute_prototype(const FeatureExtractor& features, const ClassHead& head, std::size_t class_index,
                            std::span<const Tensor> support, std::uint64_t seed) {
  if (support.empty()) fail(ErrorCode::invalid_argument, "prototype needs at least one support sample");
  const ClassHead& effective = head;
  check_head(features, effective, class_index);
  const auto weights = effective.class_weights(class_index);
  Prototype prototype{class_index, std::vector<double>(features.width(), 0.0), seed, support.size()};
  for (const auto& sample : support) {
    const auto weighted = weighted_features(features(sample), weights);
    for (std::size_t k = 0; k < weighted.size(); ++k) prototype.vector[k] += weighted[k];
  }
  for (auto& v : prototype.vector) v /= static_cast<double>(support.size());
  return prototype;
}

Prototype compute_prototype(const FeatureExtractor& features, const ClassHead& head, const LabeledDataset& dataset,
                            const SupportSet& support) {
  for (auto i : support.indices) {
    if (dataset.label(i) != support.class_index) {
      fail(ErrorCode::invalid_argument, "support sample " + std::to_string(i) + " is not labelled " +
                                            std::to_string(support.class_index));
    }
  }
  const auto images = support_images(dataset, support);
  return compute_prototype(features, head, support.class_index, images, support.seed);
}

ScoreRecord protoshot_score(const Prototype& prototype, const FeatureExtractor& features, const ClassHead& head,
                            const Tensor& x) {
  check_head(features, head, prototype.class_index);
  const auto weights = head.class_weights(prototype.class_index);
  return cosine_score(prototype.vector, weighted_features(features(x), weights));
}

std::size_t patch_start(std::size_t i, std::size_t k, std::size_t n) {
  const std::size_t before = (k - 1) / 2;
  const std::size_t start = i > before ? i - before : 0;
  return std::min(start, n - k);
}

AttributionMap attribution_map(const Prototype& prototype, const FeatureExtractor& features, const ClassHead& head,
                               const Tensor& x, const AttributionOptions& options) {
  if (x.rank() != 3) fail(ErrorCode::shape_mismatch, "attribution expects an (H, W, C) image");
  const std::size_t h = x.dim(0), w = x.dim(1), channels = x.dim(2);
  const std::size_t k = options.patch_size;
  if (k == 0) fail(ErrorCode::invalid_argument, "patch size must be >= 1");
  if (k > h || k > w) {
    fail(ErrorCode::invalid_argument, "patch size " + std::to_string(k) + " larger than image " + shape_string(x.shape()));
  }
  std::vector<float> reference = options.reference_value;
  if (reference.empty()) reference.assign(channels, 0.0f);
  if (reference.size() == 1 && channels > 1) reference.assign(channels, reference.front());
  if (reference.size() != channels) {
    fail(ErrorCode::shape_mismatch, "reference value has " + std::to_string(reference.size()) +
                                        " channels, image has " + std::to_string(channels));
  }

  check_head(features, head, prototype.class_index);
  const auto weights = head.class_weights(prototype.class_index);
  const double z_ref = cosine_score(prototype.vector, weighted_features(features(x), weights)).score;

  AttributionMap map;
  map.height = h;
  map.width = w;
  map.values.assign(h * w, 0.0);
  map.reference_score = z_ref;
  map.patch_size = k;
  map.reference_value = reference;

  const std::size_t total = h * w;
  std::size_t completed = 0;
  if (options.progress) options.progress(0, total);
  parallel_chunks(
      total, options.batch_size, options.workers,
      [&](std::size_t begin, std::size_t end) {
        Tensor perturbed = x;
        for (std::size_t m = begin; m < end; ++m) {
          const std::size_t r0 = patch_start(m / w, k, h);
          const std::size_t c0 = patch_start(m % w, k, w);
          bool changed = false;
          for (std::size_t r = r0; r < r0 + k; ++r) {
            for (std::size_t c = c0; c < c0 + k; ++c) {
              for (std::size_t ch = 0; ch < channels; ++ch) {
                changed |= perturbed.at(r, c, ch) != reference[ch];
                perturbed.at(r, c, ch) = reference[ch];
              }
            }
          }
          if (changed) {
            const auto score = cosine_score(prototype.vector, weighted_features(features(perturbed), weights)).score;
            map.values[m] = z_ref - score;
          }
          for (std::size_t r = r0; r < r0 + k; ++r) {
            for (std::size_t c = c0; c < c0 + k; ++c) {
              for (std::size_t ch = 0; ch < channels; ++ch) perturbed.at(r, c, ch) = x.at(r, c, ch);
            }
          }
        }
      },
      [&](std::size_t done) {
        completed += done;
        if (options.progress) options.progress(completed, total);
      });
  return map;
}

namespace {

double plain_cosine(const Tensor& a, const Tensor& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += static_cast<double>(a[k]) * b[k];
    aa += static_cast<double>(a[k]) * a[k];
    bb += static_cast<double>(b[k]) * b[k];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na < kDegenerateNorm || nb < kDegenerateNorm) return 0.0;
  return std::clamp(ab / (na * nb), -1.0, 1.0);
}

}  // namespace

ExMatchinaMatch exmatchina_star_features(std::span<const Tensor> support_features, const Tensor& query_features) {
  if (support_features.empty()) fail(ErrorCode::invalid_argument, "ExMatchina* needs a non-empty support set");
  ExMatchinaMatch best{-std::numeric_limits<double>::infinity(), 0};
  for (std::size_t i = 0; i < support_features.size(); ++i) {
    if (support_features[i].size() != query_features.size()) {
      fail(ErrorCode::shape_mismatch, "support and query feature widths differ");
    }
    const double s = plain_cosine(support_features[i], query_features);
    if (s > best.best_score) best = {s, i};
  }
  return best;
}

ExMatchinaMatch exmatchina_star(std::span<const Tensor> support, const FeatureExtractor& features, const Tensor& x) {
  std::vector<Tensor> support_features;
  support_features.reserve(support.size());
  for (const auto& s : support) support_features.push_back(features(s));
  return exmatchina_star_features(support_features, features(x));
}

namespace {

template <typename T>
AttributionMap saliency_impl(const Network<T>& network, const BasicTensor<T>& x, std::size_t class_index) {
  const auto& manifest = network.manifest();
  if (manifest.layers.empty() || !has_classification_head(manifest) ||
      manifest.layers.back().kind != LayerKind::softmax) {
    fail(ErrorCode::unsupported, "saliency maps need a model with a softmax classification head");
  }
  if (x.rank() != 3) fail(ErrorCode::shape_mismatch, "saliency expects an (H, W, C) image");
  const std::size_t logits_end = network.layer_count() - 1;
  const auto tape = network.record(x, logits_end);
  if (class_index >= tape.output().size()) {
    fail(ErrorCode::invalid_argument, "class " + std::to_string(class_index) + " out of range");
  }
  BasicTensor<T> seed(tape.output().shape());
  seed[class_index] = T{1};
  const auto grad = network.backward(tape, seed, logits_end);
  AttributionMap map;
  map.height = x.dim(0);
  map.width = x.dim(1);
  map.values.assign(map.height * map.width, 0.0);
  map.patch_size = 0;
  const std::size_t channels = x.dim(2);
  for (std::size_t i = 0; i < grad.size(); ++i) map.values[i / channels] += grad[i];
  return map;
}

}  // namespace

AttributionMap saliency_map(const Network<float>& network, const Tensor& x, std::size_t class_index) {
  return saliency_impl(network, x, class_index);
}

AttributionMap saliency_map(const Network<double>& network, const TensorD& x, std::size_t class_index) {
  return saliency_impl(network, x, class_index);
}

AttributionMap saliency_map(const ModelBundle& bundle, const Tensor& x, std::size_t class_index) {
  return saliency_map(Network<float>(bundle), x, class_index);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorCode::invalid_argument, "percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) fail(ErrorCode::invalid_argument, "percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double position = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lower = static_cast<std::size_t>(std::floor(position));
  const std::size_t upper = std::min(lower + 1, values.size() - 1);
  const double fraction = position - static_cast<double>(lower);
  return values[lower] + fraction * (values[upper] - values[lower]);
}

DisplayMap normalize_for_display(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::invalid_argument, "cannot normalize an empty map");
  std::vector<double> magnitudes(values.size());
  std::transform(values.begin(), values.end(), magnitudes.begin(), [](double v) { return std::abs(v); });
  DisplayMap display;
  display.color_bound = percentile(std::move(magnitudes), 99.9);
  if (!(display.color_bound > 0.0)) display.color_bound = 1.0;
  display.scaled.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    display.scaled[i] = std::clamp(values[i] / display.color_bound, -1.0, 1.0);
  }
  return display;
}

}  // namespace psx
