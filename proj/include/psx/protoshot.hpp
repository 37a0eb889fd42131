#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "psx/classifier.hpp"
#include "psx/dataset.hpp"

namespace psx {

/// Mean class-weighted feature vector of a support set for class c.
struct Prototype {
  std::size_t class_index = 0;
  std::vector<double> vector;
  std::uint64_t support_seed = 0;
  std::size_t support_size = 0;
};

/// Cosine score between a prototype and a weighted query feature. The
/// components are the K addends of the numerator divided by the norm product,
/// so they sum to the score.
struct ScoreRecord {
  double score = 0.0;
  std::vector<double> components;
  /// Either norm fell below 1e-12; the score is then defined as 0.
  bool degenerate = false;
};

inline constexpr double kDegenerateNorm = 1e-12;

/// Occlusion attribution grid: value(r, c) = reference_score - score of the
/// image with the patch at (r, c) replaced by the reference value. Positive
/// cells are features that support the class.
struct AttributionMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  double reference_score = 0.0;
  std::size_t patch_size = 1;
  std::vector<float> reference_value;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

/// f(x) ⊙ w for the given class weights.
std::vector<double> weighted_features(const Tensor& features, std::span<const float> class_weights);

/// Cosine similarity with component decomposition; degenerate norms give 0.
ScoreRecord cosine_score(std::span<const double> prototype, std::span<const double> weighted);

Prototype compute_prototype(const FeatureExtractor& features, const ClassHead& head, std::size_t class_index,
                            std::span<const Tensor> support, std::uint64_t seed = 0);
Prototype compute_prototype(const FeatureExtractor& features, const ClassHead& head, const LabeledDataset& dataset,
                            const SupportSet& support);

ScoreRecord protoshot_score(const Prototype& prototype, const FeatureExtractor& features, const ClassHead& head,
                            const Tensor& x);

struct AttributionOptions {
  /// Per-channel replacement value; empty means zeros.
  std::vector<float> reference_value;
  std::size_t patch_size = 1;
  /// Perturbed copies evaluated per work item.
  std::size_t batch_size = 32;
  /// 0 picks the hardware concurrency.
  std::size_t workers = 0;
  /// (completed perturbations, total perturbations)
  std::function<void(std::size_t, std::size_t)> progress;
};

/// Window for an occlusion patch of size k anchored at index i along an axis
/// of length n: [start, start + k), shifted to stay inside the image. Odd k is
/// centred on i; even k has i as its top-left of the centre.
std::size_t patch_start(std::size_t i, std::size_t k, std::size_t n);

AttributionMap attribution_map(const Prototype& prototype, const FeatureExtractor& features, const ClassHead& head,
                               const Tensor& x, const AttributionOptions& options = {});

struct ExMatchinaMatch {
  double best_score = 0.0;
  std::size_t best_index = 0;
};

/// Best unweighted cosine between f(x) and any support feature; ties keep the
/// lowest index and zero-norm candidates score 0.
ExMatchinaMatch exmatchina_star(std::span<const Tensor> support, const FeatureExtractor& features, const Tensor& x);
ExMatchinaMatch exmatchina_star_features(std::span<const Tensor> support_features, const Tensor& query_features);

/// d logit_c / dx summed over channels. The model must end in softmax.
AttributionMap saliency_map(const Network<float>& network, const Tensor& x, std::size_t class_index);
AttributionMap saliency_map(const Network<double>& network, const TensorD& x, std::size_t class_index);
AttributionMap saliency_map(const ModelBundle& bundle, const Tensor& x, std::size_t class_index);

/// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

struct DisplayMap {
  std::vector<double> scaled;
  double color_bound = 1.0;
};

/// Divides by the 99.9th percentile of |z| and clamps to [-1, 1]. An all-zero
/// map keeps bound 1.
DisplayMap normalize_for_display(std::span<const double> values);

}  // namespace psx
