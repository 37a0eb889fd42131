#include "psx/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "psx/parallel.hpp"
#include "psx/rng.hpp"

namespace psx {

namespace {

// Exact values at quarter turns so that grid points map onto grid points.
std::pair<double, double> sin_cos_degrees(double angle) {
  double a = std::fmod(angle, 360.0);
  if (a < 0) a += 360.0;
  if (a == 0.0) return {0.0, 1.0};
  if (a == 90.0) return {1.0, 0.0};
  if (a == 180.0) return {0.0, -1.0};
  if (a == 270.0) return {-1.0, 0.0};
  const double radians = a * std::numbers::pi / 180.0;
  return {std::sin(radians), std::cos(radians)};
}

}  // namespace

Tensor rotate_image(const Tensor& x, double angle_degrees) {
  if (x.rank() != 3 || x.dim(2) != 1) fail(ErrorCode::shape_mismatch, "rotation expects a (H, W, 1) image");
  if (x.dim(0) != x.dim(1)) fail(ErrorCode::shape_mismatch, "rotation expects a square image, got " + shape_string(x.shape()));
  if (!std::isfinite(angle_degrees)) fail(ErrorCode::invalid_argument, "rotation angle must be finite");
  const std::size_t n = x.dim(0);
  const double centre = (static_cast<double>(n) - 1.0) / 2.0;
  const auto [s, c] = sin_cos_degrees(angle_degrees);
  const auto sample = [&](long r, long col) -> double {
    if (r < 0 || col < 0 || r >= static_cast<long>(n) || col >= static_cast<long>(n)) return 0.0;
    return x.at(static_cast<std::size_t>(r), static_cast<std::size_t>(col), 0);
  };
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t col = 0; col < n; ++col) {
      const double dx = static_cast<double>(col) - centre;
      const double dy = centre - static_cast<double>(r);
      const double sx = dx * c + dy * s;
      const double sy = -dx * s + dy * c;
      const double src_col = centre + sx;
      const double src_row = centre - sy;
      const double r0 = std::floor(src_row), c0 = std::floor(src_col);
      const double fr = src_row - r0, fc = src_col - c0;
      const long ir = static_cast<long>(r0), ic = static_cast<long>(c0);
      double v = (1 - fr) * (1 - fc) * sample(ir, ic);
      if (fc != 0.0) v += (1 - fr) * fc * sample(ir, ic + 1);
      if (fr != 0.0) v += fr * (1 - fc) * sample(ir + 1, ic);
      if (fr != 0.0 && fc != 0.0) v += fr * fc * sample(ir + 1, ic + 1);
      out.at(r, col, 0) = static_cast<float>(v);
    }
  }
  return out;
}

ClassReference make_class_reference(const FeatureExtractor& features, const ClassHead& head,
                                    const LabeledDataset& dataset, const SupportSet& support) {
  ClassReference reference{compute_prototype(features, head, dataset, support), {}};
  reference.support_features.reserve(support.indices.size());
  for (auto i : support.indices) reference.support_features.push_back(features(dataset.image(i)));
  return reference;
}

namespace {

std::size_t row_choice(const std::vector<double>& row) { return argmax(std::span<const double>(row)); }

double agreement(const SweepTrace& trace, const std::vector<std::vector<double>>& scores) {
  if (trace.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    hits += trace.classes[row_choice(scores[i])] == trace.predictions[i];
  }
  return static_cast<double>(hits) / static_cast<double>(trace.size());
}

}  // namespace

std::size_t SweepTrace::protoshot_choice(std::size_t step) const { return classes.at(row_choice(protoshot.at(step))); }
std::size_t SweepTrace::exmatchina_choice(std::size_t step) const {
  return classes.at(row_choice(exmatchina.at(step)));
}
double SweepTrace::protoshot_agreement() const { return agreement(*this, protoshot); }
double SweepTrace::exmatchina_agreement() const { return agreement(*this, exmatchina); }

SweepTrace rotation_sweep(const SplitModel& model, std::span<const ClassReference> references, const Tensor& x,
                          const SweepOptions& options) {
  if (references.empty()) fail(ErrorCode::invalid_argument, "sweep needs at least one class of interest");
  if (!(options.step_degrees > 0.0) || !std::isfinite(options.step_degrees)) {
    fail(ErrorCode::invalid_argument, "sweep step must be a positive number of degrees");
  }
  for (const auto& ref : references) {
    if (ref.support_features.empty()) {
      fail(ErrorCode::invalid_argument, "class " + std::to_string(ref.prototype.class_index) + " has no support set");
    }
  }
  SweepTrace trace;
  for (std::size_t i = 0;; ++i) {
    const double angle = static_cast<double>(i) * options.step_degrees;
    if (angle >= 360.0) break;
    trace.angles.push_back(angle);
  }
  for (const auto& ref : references) trace.classes.push_back(ref.prototype.class_index);
  const std::size_t steps = trace.size();
  trace.protoshot.assign(steps, std::vector<double>(references.size()));
  trace.exmatchina.assign(steps, std::vector<double>(references.size()));
  trace.predictions.assign(steps, 0);

  std::size_t completed = 0;
  if (options.progress) options.progress(0, steps);
  parallel_chunks(
      steps, 1, options.workers,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          const Tensor rotated = rotate_image(x, trace.angles[i]);
          const Tensor f = model.features(rotated);
          trace.predictions[i] = predict(model, rotated).class_index;
          for (std::size_t k = 0; k < references.size(); ++k) {
            const auto& ref = references[k];
            const auto weights = model.head.class_weights(ref.prototype.class_index);
            trace.protoshot[i][k] = cosine_score(ref.prototype.vector, weighted_features(f, weights)).score;
            trace.exmatchina[i][k] = exmatchina_star_features(ref.support_features, f).best_score;
          }
        }
      },
      [&](std::size_t done) {
        completed += done;
        if (options.progress) options.progress(completed, steps);
      });
  return trace;
}

std::vector<AblationResult> region_ablation(const Prototype& prototype, const FeatureExtractor& features,
                                            const ClassHead& head, const Tensor& x,
                                            std::span<const RegionMask> masks) {
  if (x.rank() != 3) fail(ErrorCode::shape_mismatch, "ablation expects an (H, W, C) image");
  std::vector<AblationResult> results;
  results.push_back({kBaselineId, protoshot_score(prototype, features, head, x).score});
  for (const auto& mask : masks) {
    if (mask.height != x.dim(0) || mask.width != x.dim(1) || mask.cells.size() != mask.height * mask.width) {
      fail(ErrorCode::shape_mismatch, "mask '" + mask.id + "' does not match image extents " + shape_string(x.shape()));
    }
    Tensor ablated = x;
    for (std::size_t r = 0; r < mask.height; ++r) {
      for (std::size_t c = 0; c < mask.width; ++c) {
        if (!mask.cells[r * mask.width + c]) continue;
        for (std::size_t ch = 0; ch < x.dim(2); ++ch) ablated.at(r, c, ch) = 0.0f;
      }
    }
    results.push_back({mask.id, protoshot_score(prototype, features, head, ablated).score});
  }
  return results;
}

Tensor fgsm_generate(const Network<float>& network, const Tensor& x, std::size_t label, double epsilon) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) fail(ErrorCode::invalid_argument, "epsilon must be >= 0");
  const Tensor grad = input_gradient(network, x, CrossEntropyLoss{label});
  Tensor out = x;
  const auto step = static_cast<float>(epsilon);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (grad[i] == 0.0f || step == 0.0f) continue;
    out[i] = std::clamp(x[i] + (grad[i] > 0.0f ? step : -step), 0.0f, 1.0f);
  }
  return out;
}

Tensor fgsm_generate(const ModelBundle& bundle, const Tensor& x, std::size_t label, double epsilon) {
  return fgsm_generate(Network<float>(bundle), x, label, epsilon);
}

RocCurve detector_roc(std::span<const double> benign, std::span<const double> adversarial) {
  if (benign.empty() || adversarial.empty()) fail(ErrorCode::invalid_argument, "ROC needs non-empty score lists");
  for (auto list : {benign, adversarial}) {
    for (double v : list) {
      if (std::isnan(v)) fail(ErrorCode::non_finite, "ROC scores must not be NaN");
    }
  }
  std::vector<double> b(benign.begin(), benign.end()), a(adversarial.begin(), adversarial.end());
  std::sort(b.begin(), b.end());
  std::sort(a.begin(), a.end());
  std::vector<double> thresholds;
  thresholds.reserve(b.size() + a.size() + 2);
  thresholds.push_back(-std::numeric_limits<double>::infinity());
  std::merge(b.begin(), b.end(), a.begin(), a.end(), std::back_inserter(thresholds));
  thresholds.push_back(std::numeric_limits<double>::infinity());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const auto rate_below = [](const std::vector<double>& sorted, double t) {
    const auto count = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    return static_cast<double>(count) / static_cast<double>(sorted.size());
  };
  RocCurve roc;
  for (double t : thresholds) {
    // +inf flags every finite score; an infinite score still counts once t passes it.
    double fpr = rate_below(b, t), tpr = rate_below(a, t);
    if (std::isinf(t) && t > 0) fpr = tpr = 1.0;
    roc.points.push_back({t, fpr, tpr});
  }
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& p = roc.points[i - 1];
    const auto& q = roc.points[i];
    roc.auc += (q.false_positive_rate - p.false_positive_rate) * (q.true_positive_rate + p.true_positive_rate) / 2.0;
  }
  return roc;
}

ScoreDistributions score_distributions(const SplitModel& model, std::span<const Prototype> prototypes,
                                       const LabeledDataset& dataset, std::size_t n, std::uint64_t seed,
                                       double epsilon, const DistributionOptions& options) {
  if (!model.network) fail(ErrorCode::unsupported, "adversarial scoring needs the full network for FGSM");
  if (n > dataset.size()) {
    fail(ErrorCode::insufficient_samples, "requested " + std::to_string(n) + " samples from a dataset of " +
                                              std::to_string(dataset.size()));
  }
  std::map<std::size_t, const Prototype*> by_class;
  for (const auto& p : prototypes) by_class[p.class_index] = &p;

  ScoreDistributions result;
  Rng rng(seed);
  result.indices = rng.sample_without_replacement(dataset.size(), n);
  for (auto i : result.indices) {
    if (!by_class.contains(dataset.label(i))) {
      fail(ErrorCode::invalid_argument, "no prototype for class " + std::to_string(dataset.label(i)));
    }
  }
  result.benign.assign(n, 0.0);
  result.adversarial.assign(n, 0.0);
  std::size_t completed = 0;
  if (options.progress) options.progress(0, n);
  parallel_chunks(
      n, 8, options.workers,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) {
          const std::size_t index = result.indices[k];
          const std::size_t label = dataset.label(index);
          const Prototype& prototype = *by_class.at(label);
          const Tensor& x = dataset.image(index);
          result.benign[k] = protoshot_score(prototype, model.features, model.head, x).score;
          const Tensor adversarial = fgsm_generate(*model.network, x, label, epsilon);
          result.adversarial[k] = protoshot_score(prototype, model.features, model.head, adversarial).score;
        }
      },
      [&](std::size_t done) {
        completed += done;
        if (options.progress) options.progress(completed, n);
      });
  return result;
}

namespace {

std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream out;
  out.precision(12);
  out << v;
  return out.str();
}

nlohmann::json json_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace

std::string sweep_to_csv(const SweepTrace& trace) {
  std::ostringstream out;
  out << "angle,prediction";
  for (auto c : trace.classes) out << ",protoshot_" << c;
  for (auto c : trace.classes) out << ",exmatchina_" << c;
  out << '\n';
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << number(trace.angles[i]) << ',' << trace.predictions[i];
    for (double v : trace.protoshot[i]) out << ',' << number(v);
    for (double v : trace.exmatchina[i]) out << ',' << number(v);
    out << '\n';
  }
  return out.str();
}

std::string sweep_to_json(const SweepTrace& trace) {
  nlohmann::ordered_json j;
  j["angles"] = trace.angles;
  j["classes"] = trace.classes;
  j["predictions"] = trace.predictions;
  j["protoshot"] = trace.protoshot;
  j["exmatchina"] = trace.exmatchina;
  j["protoshot_agreement"] = trace.protoshot_agreement();
  j["exmatchina_agreement"] = trace.exmatchina_agreement();
  return j.dump(2) + "\n";
}

std::string roc_to_csv(const RocCurve& roc) {
  std::ostringstream out;
  out << "threshold,false_positive_rate,true_positive_rate\n";
  for (const auto& p : roc.points) {
    out << number(p.threshold) << ',' << number(p.false_positive_rate) << ',' << number(p.true_positive_rate) << '\n';
  }
  return out.str();
}

std::string roc_to_json(const RocCurve& roc) {
  nlohmann::ordered_json j;
  j["auc"] = roc.auc;
  auto& points = j["points"] = nlohmann::ordered_json::array();
  for (const auto& p : roc.points) {
    points.push_back({{"threshold", json_number(p.threshold)},
                      {"false_positive_rate", p.false_positive_rate},
                      {"true_positive_rate", p.true_positive_rate}});
  }
  return j.dump(2) + "\n";
}

}  // namespace psx
