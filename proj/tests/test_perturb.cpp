#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "psx/perturb.hpp"
#include "test_support.hpp"

using namespace psx;
using psx::testing::random_bundle;
using psx::testing::random_tensor;

namespace {

Manifest small_cnn(std::size_t side, std::size_t classes) {
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.push_back(std::to_string(c));
  return ModelBuilder({side, side, 1})
      .conv2d("conv", 4, 3, Padding::valid)
      .relu("conv_relu")
      .maxpool2d("pool", 2)
      .flatten("flat")
      .dense("feature", 12)
      .relu("feature_relu")
      .mark_feature()
      .dense("logits", classes)
      .softmax("softmax")
      .labels(labels)
      .build();
}

LabeledDataset random_dataset(std::size_t side, std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      images.push_back(random_tensor<float>({side, side, 1}, seed + c * 1000 + i, 0, 1));
      labels.push_back(c);
    }
  }
  return LabeledDataset(std::move(images), std::move(labels));
}

// Area under the ROC as the probability that an adversarial score ranks below
// a benign one, ties counting one half.
double rank_auc(const std::vector<double>& benign, const std::vector<double>& adversarial) {
  double wins = 0;
  for (double b : benign)
    for (double a : adversarial) wins += a < b ? 1.0 : (a == b ? 0.5 : 0.0);
  return wins / static_cast<double>(benign.size() * adversarial.size());
}

}  // namespace

TEST_CASE("rotation by 0 degrees is bit-identical") {
  const auto x = random_tensor<float>({9, 9, 1}, 1, 0, 1);
  CHECK(rotate_image(x, 0.0) == x);
  CHECK(rotate_image(x, 360.0) == x);
}

TEST_CASE("rotation by 90 degrees is the counter-clockwise index permutation") {
  for (std::size_t n : {4u, 7u, 28u}) {
    const auto x = random_tensor<float>({n, n, 1}, n, 0, 1);
    const auto r = rotate_image(x, 90.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(r.at(i, j, 0) == x.at(j, n - 1 - i, 0));
    const auto back = rotate_image(x, -90.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(back.at(i, j, 0) == x.at(n - 1 - j, i, 0));
  }
}

TEST_CASE("a pixel to the right of centre moves up under a small counter-clockwise turn") {
  Tensor x({5, 5, 1});
  x.at(2, 4, 0) = 1.0f;
  const auto r = rotate_image(x, 90.0);
  CHECK(r.at(0, 2, 0) == 1.0f);
  const auto tilted = rotate_image(x, 10.0);
  float upper = 0, lower = 0;
  for (std::size_t c = 0; c < 5; ++c) upper += tilted.at(1, c, 0), lower += tilted.at(3, c, 0);
  CHECK(upper > lower);
}

TEST_CASE("rotating twice by 180 degrees restores the image") {
  const auto x = random_tensor<float>({12, 12, 1}, 3, 0, 1);
  const auto twice = rotate_image(rotate_image(x, 180.0), 180.0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(twice[i] - x[i]) <= 1e-5);
}

TEST_CASE("bilinear rotation matches an independent interpolation at an oblique angle") {
  const std::size_t n = 6;
  const auto x = random_tensor<float>({n, n, 1}, 4, 0, 1);
  const double angle = 33.0, t = angle * M_PI / 180.0, centre = 2.5;
  const auto r = rotate_image(x, angle);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      // destination offset rotated clockwise back into the source, in (row, col) terms
      const double dr = i - centre, dc = j - centre;
      const double sr = centre + dr * std::cos(t) + dc * std::sin(t);
      const double sc = centre - dr * std::sin(t) + dc * std::cos(t);
      double v = 0;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const double rr = std::floor(sr) + a, cc = std::floor(sc) + b;
          const double w = (1 - std::abs(sr - rr)) * (1 - std::abs(sc - cc));
          if (rr >= 0 && cc >= 0 && rr < n && cc < n) v += w * x.at(std::size_t(rr), std::size_t(cc), 0);
        }
      }
      CHECK(r.at(i, j, 0) == doctest::Approx(v).epsilon(1e-6));
    }
  }
}

TEST_CASE("rotation rejects non-square and multi-channel images") {
  CHECK_THROWS_AS(rotate_image(Tensor({4, 5, 1}), 10), Error);
  CHECK_THROWS_AS(rotate_image(Tensor({4, 4, 3}), 10), Error);
}

TEST_CASE("rotation sweep cardinality, angle zero and worker independence") {
  const auto bundle = random_bundle(small_cnn(10, 4), 21);
  const auto model = split_model(bundle);
  const auto data = random_dataset(10, 4, 5, 300);
  std::vector<ClassReference> refs;
  for (std::size_t c : {0u, 2u, 3u}) {
    refs.push_back(make_class_reference(model.features, model.head, data, select_support_set(data, c, 3, 9)));
  }
  const auto x = data.image(7);

  SweepOptions options;
  options.workers = 1;
  const auto trace = rotation_sweep(model, refs, x, options);
  REQUIRE(trace.size() == 360);
  CHECK(trace.angles.front() == 0.0);
  CHECK(trace.angles.back() == 359.0);
  CHECK(trace.classes == std::vector<std::size_t>{0, 2, 3});
  CHECK(trace.protoshot.size() == 360);
  CHECK(trace.exmatchina.size() == 360);
  CHECK(trace.predictions.size() == 360);
  for (std::size_t k = 0; k < refs.size(); ++k) {
    CHECK(trace.protoshot[0][k] == protoshot_score(refs[k].prototype, model.features, model.head, x).score);
    CHECK(trace.exmatchina[0][k] == exmatchina_star(support_images(data, select_support_set(data, trace.classes[k], 3, 9)),
                                                    model.features, x)
                                        .best_score);
  }
  CHECK(trace.predictions[0] == predict(bundle, x).class_index);
  for (const auto& row : trace.protoshot)
    for (double v : row) CHECK(std::abs(v) <= 1.0);
  CHECK(trace.protoshot_agreement() >= 0.0);
  CHECK(trace.protoshot_agreement() <= 1.0);

  SweepOptions parallel;
  parallel.workers = 4;
  std::size_t last = 0;
  parallel.progress = [&](std::size_t done, std::size_t) {
    CHECK(done >= last);
    last = done;
  };
  const auto again = rotation_sweep(model, refs, x, parallel);
  CHECK(again.protoshot == trace.protoshot);
  CHECK(again.exmatchina == trace.exmatchina);
  CHECK(again.predictions == trace.predictions);
  CHECK(last == 360);

  SweepOptions coarse;
  coarse.step_degrees = 45;
  CHECK(rotation_sweep(model, refs, x, coarse).size() == 8);
}

TEST_CASE("agreement rate counts steps whose argmax class matches the prediction") {
  SweepTrace trace;
  trace.angles = {0, 1, 2, 3};
  trace.classes = {0, 5, 6, 9};
  trace.protoshot = {{0.1, 0.2, 0.9, 0.3}, {0.1, 0.8, 0.2, 0.3}, {0.9, 0.2, 0.2, 0.3}, {0.5, 0.5, 0.1, 0.1}};
  trace.exmatchina = {{0.1, 0.2, 0.3, 0.9}, {0.1, 0.8, 0.2, 0.3}, {0.1, 0.2, 0.2, 0.3}, {0.1, 0.1, 0.1, 0.1}};
  trace.predictions = {6, 5, 9, 0};
  CHECK(trace.protoshot_choice(3) == 0);
  CHECK(trace.protoshot_agreement() == 0.75);
  CHECK(trace.exmatchina_agreement() == 0.75);
}

TEST_CASE("region ablation: empty mask, full mask and ranking against attribution") {
  // Omniglot-style character: three strokes of distinct sizes on a 12x12 canvas.
  const std::size_t n = 12;
  Tensor character({n, n, 1});
  RegionMask big{"big", n, n, std::vector<bool>(n * n)}, medium{"medium", n, n, std::vector<bool>(n * n)},
      small{"small", n, n, std::vector<bool>(n * n)};
  const auto stroke = [&](RegionMask& mask, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) {
        character.at(r, c, 0) = 1.0f;
        mask.cells[r * n + c] = true;
      }
  };
  stroke(big, 1, 11, 1, 3);     // 20 pixels
  stroke(medium, 2, 3, 5, 11);  // 6 pixels
  stroke(small, 8, 10, 7, 8);   // 2 pixels

  const auto fe = FeatureExtractor::identity({n, n, 1});
  const auto head = ClassHead::ones(n * n);
  std::vector<Tensor> support;
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto variant = character;
    const auto noise = random_tensor<float>({n, n, 1}, 50 + s, 0, 0.1);
    for (std::size_t i = 0; i < variant.size(); ++i) variant[i] = std::clamp(variant[i] + noise[i], 0.0f, 1.0f);
    support.push_back(variant);
  }
  const auto p = compute_prototype(fe, head, 0, support);

  const RegionMask empty{"empty", n, n, std::vector<bool>(n * n, false)};
  const RegionMask full{"full", n, n, std::vector<bool>(n * n, true)};
  const std::vector<RegionMask> masks{empty, full, big, medium, small};
  const auto results = region_ablation(p, fe, head, character, masks);
  REQUIRE(results.size() == 6);
  CHECK(results[0].id == kBaselineId);
  CHECK(results[1].score == results[0].score);
  CHECK(results[2].score == protoshot_score(p, fe, head, Tensor({n, n, 1})).score);

  const auto map = attribution_map(p, fe, head, character);
  std::vector<std::pair<double, std::string>> by_ablation, by_attribution;
  for (std::size_t m = 2; m < masks.size(); ++m) {
    by_ablation.emplace_back(results[0].score - results[m + 1].score, masks[m].id);
    double total = 0;
    for (std::size_t i = 0; i < n * n; ++i)
      if (masks[m].cells[i]) total += map.values[i];
    by_attribution.emplace_back(total, masks[m].id);
  }
  std::sort(by_ablation.rbegin(), by_ablation.rend());
  std::sort(by_attribution.rbegin(), by_attribution.rend());
  for (std::size_t i = 0; i < 3; ++i) CHECK(by_ablation[i].second == by_attribution[i].second);
  CHECK(by_ablation[0].second == "big");

  const std::vector<RegionMask> wrong{RegionMask{"wrong", n - 1, n, std::vector<bool>((n - 1) * n)}};
  CHECK_THROWS_AS(region_ablation(p, fe, head, character, wrong), Error);
}

TEST_CASE("FGSM with epsilon 0 leaves the input unchanged") {
  const auto bundle = random_bundle(small_cnn(8, 3), 5);
  const auto x = random_tensor<float>({8, 8, 1}, 6, 0, 1);
  CHECK(fgsm_generate(bundle, x, 1, 0.0) == x);
  CHECK_THROWS_AS(fgsm_generate(bundle, x, 1, -0.1), Error);
}

TEST_CASE("FGSM on a linear softmax model follows the sign of the closed-form gradient") {
  const auto manifest =
      ModelBuilder({2, 2, 1}).flatten("flat").mark_feature().dense("dense", 2).softmax("softmax").build();
  // input 3 has zero weight in both classes, so its gradient is exactly 0
  const Tensor w({4, 2}, {1.0f, -1.0f, -2.0f, 0.5f, 0.25f, 0.75f, 0.0f, 0.0f});
  const ModelBundle bundle(manifest, {{"dense/kernel", w}, {"dense/bias", Tensor({2})}});
  const Tensor x({2, 2, 1}, {0.5f, 0.5f, 0.5f, 0.5f});
  const std::size_t label = 0;
  // dL/dx = W (p - e_label)
  double z[2] = {0, 0};
  for (int k = 0; k < 4; ++k)
    for (int c = 0; c < 2; ++c) z[c] += w[k * 2 + c] * x[k];
  const double p1 = 1.0 / (1.0 + std::exp(z[0] - z[1])), p0 = 1.0 - p1;
  const double eps = 0.15;
  const auto adv = fgsm_generate(bundle, x, label, eps);
  for (int k = 0; k < 4; ++k) {
    const double g = w[k * 2] * (p0 - 1.0) + w[k * 2 + 1] * p1;
    const double sign = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
    CHECK(adv[k] == doctest::Approx(0.5 + eps * sign).epsilon(1e-7));
  }
  CHECK(adv[3] == x[3]);
}

TEST_CASE("FGSM output stays in [0, 1] and moves each pixel by at most epsilon") {
  const auto bundle = random_bundle(small_cnn(8, 3), 7);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = random_tensor<float>({8, 8, 1}, 100 + s, 0, 1);
    for (double eps : {0.05, 0.15, 0.7}) {
      const auto adv = fgsm_generate(bundle, x, s % 3, eps);
      for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(adv[i] >= 0.0f);
        CHECK(adv[i] <= 1.0f);
        CHECK(std::abs(adv[i] - x[i]) <= eps + 1e-6);
      }
    }
  }
}

TEST_CASE("ROC hand case gives AUC 0.75, confirmed by exhaustive threshold enumeration") {
  const std::vector<double> benign{0.9, 0.8}, adversarial{0.85, 0.1};
  const auto roc = detector_roc(benign, adversarial);
  CHECK(roc.auc == 0.75);

  // oracle: try every threshold between and around the scores and integrate
  std::set<double> candidates{-1e9, 1e9};
  for (double v : {0.9, 0.8, 0.85, 0.1}) candidates.insert(v), candidates.insert(v + 1e-9);
  std::vector<std::pair<double, double>> pts;
  for (double t : candidates) {
    double fp = 0, tp = 0;
    for (double b : benign) fp += b < t;
    for (double a : adversarial) tp += a < t;
    pts.emplace_back(fp / 2, tp / 2);
  }
  double area = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2;
  CHECK(area == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(rank_auc(benign, adversarial) == 0.75);
}

TEST_CASE("ROC curve shape and trivial cases") {
  const std::vector<double> high{0.9, 0.95, 0.8}, low{0.1, 0.2};
  const auto perfect = detector_roc(high, low);
  CHECK(perfect.auc == 1.0);
  CHECK(perfect.points.front().false_positive_rate == 0.0);
  CHECK(perfect.points.front().true_positive_rate == 0.0);
  CHECK(perfect.points.back().false_positive_rate == 1.0);
  CHECK(perfect.points.back().true_positive_rate == 1.0);
  CHECK(detector_roc(low, high).auc == 0.0);

  const auto same = random_tensor<double>({50}, 3, 0, 1);
  const std::vector<double> list(same.values().begin(), same.values().end());
  CHECK(std::abs(detector_roc(list, list).auc - 0.5) < 1e-9);

  const std::vector<double> empty;
  CHECK_THROWS_AS(detector_roc(empty, list), Error);
  CHECK_THROWS_AS(detector_roc(list, empty), Error);
}

TEST_CASE("ROC points are monotone and the AUC equals the rank statistic") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto b = random_tensor<double>({30}, s, 0, 1), a = random_tensor<double>({25}, s + 500, -0.3, 0.8);
    std::vector<double> benign(b.values().begin(), b.values().end()), adversarial(a.values().begin(), a.values().end());
    // force ties across the lists
    adversarial[0] = benign[3];
    adversarial[1] = benign[3];
    const auto roc = detector_roc(benign, adversarial);
    for (std::size_t i = 1; i < roc.points.size(); ++i) {
      CHECK(roc.points[i].false_positive_rate >= roc.points[i - 1].false_positive_rate);
      CHECK(roc.points[i].true_positive_rate >= roc.points[i - 1].true_positive_rate);
    }
    CHECK(roc.auc == doctest::Approx(rank_auc(benign, adversarial)).epsilon(1e-12));
  }
}

TEST_CASE("AUC is invariant under strictly increasing transforms of both lists") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto b = random_tensor<double>({40}, s, -1, 1), a = random_tensor<double>({40}, s + 70, -1, 0.6);
    std::vector<double> benign(b.values().begin(), b.values().end()), adversarial(a.values().begin(), a.values().end());
    const double base = detector_roc(benign, adversarial).auc;
    const std::vector<std::function<double(double)>> transforms{
        [](double v) { return std::exp(3 * v); }, [](double v) { return 2 * v - 7; },
        [](double v) { return v * v * v; }, [](double v) { return std::atan(v * 10); }};
    for (const auto& f : transforms) {
      std::vector<double> tb, ta;
      for (double v : benign) tb.push_back(f(v));
      for (double v : adversarial) ta.push_back(f(v));
      CHECK(detector_roc(tb, ta).auc == base);
    }
  }
}

TEST_CASE("score distributions: cardinality, epsilon 0 and reproducibility") {
  const auto bundle = random_bundle(small_cnn(8, 3), 8);
  const auto model = split_model(bundle);
  const auto data = random_dataset(8, 3, 10, 900);
  std::vector<Prototype> prototypes;
  for (std::size_t c = 0; c < 3; ++c) {
    prototypes.push_back(compute_prototype(model.features, model.head, data, select_support_set(data, c, 4, c)));
  }
  const auto none = score_distributions(model, prototypes, data, 12, 3, 0.0);
  CHECK(none.benign.size() == 12);
  CHECK(none.adversarial.size() == 12);
  CHECK(none.benign == none.adversarial);
  CHECK(std::set<std::size_t>(none.indices.begin(), none.indices.end()).size() == 12);

  DistributionOptions serial;
  serial.workers = 1;
  const auto a = score_distributions(model, prototypes, data, 12, 3, 0.15, serial);
  const auto b = score_distributions(model, prototypes, data, 12, 3, 0.15);
  CHECK(a.indices == none.indices);
  CHECK(a.benign == b.benign);
  CHECK(a.adversarial == b.adversarial);
  for (std::size_t k = 0; k < 12; ++k) {
    const auto i = a.indices[k];
    CHECK(a.benign[k] == protoshot_score(prototypes[data.label(i)], model.features, model.head, data.image(i)).score);
  }
  CHECK_THROWS_AS(score_distributions(model, prototypes, data, 31, 3, 0.15), Error);
  const std::vector<Prototype> partial{prototypes[0]};
  CHECK_THROWS_AS(score_distributions(model, partial, data, 30, 3, 0.15), Error);
}

TEST_CASE("sweep and ROC exports") {
  SweepTrace trace;
  trace.angles = {0, 90};
  trace.classes = {6, 9};
  trace.protoshot = {{0.9, 0.1}, {0.2, 0.7}};
  trace.exmatchina = {{0.8, 0.3}, {0.4, 0.5}};
  trace.predictions = {6, 9};
  const auto csv = sweep_to_csv(trace);
  CHECK(csv.starts_with("angle,prediction,protoshot_6,protoshot_9,exmatchina_6,exmatchina_9\n0,6,0.9,0.1,0.8,0.3\n"));
  const auto json = nlohmann::json::parse(sweep_to_json(trace));
  CHECK(json["angles"].size() == 2);
  CHECK(json["protoshot_agreement"] == 1.0);

  const std::vector<double> benign{0.9, 0.8}, adversarial{0.85, 0.1};
  const auto roc = detector_roc(benign, adversarial);
  const auto roc_json = nlohmann::json::parse(roc_to_json(roc));
  CHECK(roc_json["auc"] == 0.75);
  CHECK(roc_json["points"].front()["threshold"] == "-inf");
  CHECK(roc_to_csv(roc).starts_with("threshold,false_positive_rate,true_positive_rate\n-inf,0,0\n"));
}
