#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "psx/protoshot.hpp"

namespace psx {

/// Counter-clockwise rotation of a square single-channel image about its
/// centre with bilinear interpolation; samples outside the image read as 0.
Tensor rotate_image(const Tensor& x, double angle_degrees);

/// Everything a sweep needs about one class of interest.
struct ClassReference {
  Prototype prototype;
  /// Unweighted features of the support samples, for ExMatchina*.
  std::vector<Tensor> support_features;
};

ClassReference make_class_reference(const FeatureExtractor& features, const ClassHead& head,
                                    const LabeledDataset& dataset, const SupportSet& support);

struct SweepTrace {
  std::vector<double> angles;
  std::vector<std::size_t> classes;
  /// [step][class position]
  std::vector<std::vector<double>> protoshot;
  std::vector<std::vector<double>> exmatchina;
  std::vector<std::size_t> predictions;

  std::size_t size() const noexcept { return angles.size(); }
  /// Class of interest with the highest score at `step` (lowest position wins ties).
  std::size_t protoshot_choice(std::size_t step) const;
  std::size_t exmatchina_choice(std::size_t step) const;
  double protoshot_agreement() const;
  double exmatchina_agreement() const;
};

struct SweepOptions {
  double step_degrees = 1.0;
  std::size_t workers = 0;
  std::function<void(std::size_t, std::size_t)> progress;
};

/// Angles 0, step, 2*step, ... below 360. The model prediction needs a full
/// classification head.
SweepTrace rotation_sweep(const SplitModel& model, std::span<const ClassReference> references, const Tensor& x,
                          const SweepOptions& options = {});

struct RegionMask {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<bool> cells;
};

struct AblationResult {
  std::string id;
  double score = 0.0;
};

inline constexpr const char* kBaselineId = "baseline";

/// First entry is the unmasked baseline; then one entry per mask with its
/// region set to 0.
std::vector<AblationResult> region_ablation(const Prototype& prototype, const FeatureExtractor& features,
                                            const ClassHead& head, const Tensor& x,
                                            std::span<const RegionMask> masks);

inline constexpr double kDefaultEpsilon = 0.15;

/// clamp(x + epsilon * sign(dL/dx), 0, 1) for cross-entropy against `label`.
Tensor fgsm_generate(const Network<float>& network, const Tensor& x, std::size_t label, double epsilon);
Tensor fgsm_generate(const ModelBundle& bundle, const Tensor& x, std::size_t label, double epsilon);

struct RocPoint {
  double threshold = 0.0;
  double false_positive_rate = 0.0;
  double true_positive_rate = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// Flags a sample as adversarial when its score is below the threshold.
/// Thresholds run over -inf, every distinct score and +inf.
RocCurve detector_roc(std::span<const double> benign, std::span<const double> adversarial);

struct ScoreDistributions {
  std::vector<std::size_t> indices;
  std::vector<double> benign;
  std::vector<double> adversarial;
};

struct DistributionOptions {
  std::size_t workers = 0;
  std::function<void(std::size_t, std::size_t)> progress;
};

/// Draws n samples (without replacement) and scores each, and its FGSM
/// counterpart, against the prototype of its own label.
ScoreDistributions score_distributions(const SplitModel& model, std::span<const Prototype> prototypes,
                                       const LabeledDataset& dataset, std::size_t n, std::uint64_t seed,
                                       double epsilon, const DistributionOptions& options = {});

std::string sweep_to_csv(const SweepTrace& trace);
std::string sweep_to_json(const SweepTrace& trace);
std::string roc_to_csv(const RocCurve& roc);
std::string roc_to_json(const RocCurve& roc);

}  // namespace psx
