// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any
// criterion fails. An optional argument names a directory for the trained
// fixture bundle.
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <iostream>
#include <set>
#include <sstream>

#include "psx/architectures.hpp"
#include "psx/fixture.hpp"
#include "psx/perturb.hpp"
#include "test_support.hpp"

using namespace psx;
using psx::testing::max_relative_error;
using psx::testing::random_bundle;
using psx::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Report {
 public:
  void run(const std::string& name, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = body();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream line;
    line.precision(3);
    line << (outcome.pass ? "PASS" : "FAIL") << "  " << name << "  (" << std::fixed << seconds << " s)  "
         << outcome.detail;
    std::cout << line.str() << std::endl;
    failures_ += outcome.pass ? 0 : 1;
  }
  int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---- gradient checks -------------------------------------------------------

Manifest probe(const Shape& input, const std::function<void(ModelBuilder&)>& add) {
  ModelBuilder b(input);
  add(b);
  return b.flatten("probe_flatten").mark_feature().dense("probe_dense", 3).softmax("probe_softmax").build();
}

double loss_at(const Network<double>& net, const TensorD& x, std::size_t target) {
  return cross_entropy_loss(net, x, CrossEntropyLoss{target});
}

// Worst relative error of input and weight gradients; weights are sampled at
// up to `per_tensor` coordinates each.
double gradient_error(const ModelBundle& bundle, std::uint64_t seed, std::size_t per_tensor) {
  Network<double> net(bundle);
  const auto x = random_tensor<double>(bundle.manifest().input_shape, seed, 0, 1);
  const std::size_t target = 1;
  const std::size_t end = net.layer_count() - 1;
  const auto tape = net.record(x, end);
  const auto eval = cross_entropy_from_logits(tape.output(), CrossEntropyLoss{target});
  ParameterGradients<double> grads;
  const auto input_grad = net.backward(tape, eval.logit_grad, end, &grads);
  double worst = max_relative_error(input_grad, finite_difference_gradient(net, x, CrossEntropyLoss{target}, 1e-6));

  Rng pick(seed);
  for (const auto& name : net.parameter_names()) {
    if (!net.parameter_trainable(name)) continue;
    auto& w = net.parameter(name);
    const auto coords = pick.sample_without_replacement(w.size(), std::min(per_tensor, w.size()));
    for (auto i : coords) {
      const double saved = w[i], h = 1e-6;
      w[i] = saved + h;
      const double up = loss_at(net, x, target);
      w[i] = saved - h;
      const double down = loss_at(net, x, target);
      w[i] = saved;
      const double numeric = (up - down) / (2 * h);
      if (std::abs(numeric) > 1e-6) worst = std::max(worst, std::abs(grads.at(name)[i] - numeric) / std::abs(numeric));
    }
  }
  return worst;
}

// ---- helpers over the trained fixture ---------------------------------------

double brute_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return (aa == 0 || bb == 0) ? 0.0 : ab / std::sqrt(aa * bb);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path data_dir = argc > 1 ? argv[1] : PSX_DATA_DIR "/mnist5k";
  const std::filesystem::path save_dir = argc > 2 ? argv[2] : "";
  Report report;

  report.run("parameter-counts", [] {
    const auto mnist = count_parameters(architectures::mnist_cnn());
    const auto omni = count_parameters(architectures::omniglot_protonet());
    const auto vgg = count_parameters(architectures::vgg16());
    const bool ok = mnist.total == 1199882 && omni.total == 112448 && omni.trainable == 111936 &&
                    omni.non_trainable == 512 && vgg.total == 138357544;
    return Outcome{ok, "mnist=" + std::to_string(mnist.total) + " omniglot=" + std::to_string(omni.total) + "/" +
                           std::to_string(omni.trainable) + "/" + std::to_string(omni.non_trainable) +
                           " vgg16=" + std::to_string(vgg.total)};
  });

  report.run("gradient-correctness", [] {
    const std::vector<std::pair<std::string, Manifest>> kinds{
        {"conv2d-valid", probe({6, 6, 2}, [](ModelBuilder& b) { b.conv2d("c", 3, 3, Padding::valid); })},
        {"conv2d-same-s2", probe({7, 7, 2}, [](ModelBuilder& b) { b.conv2d("c", 3, 3, Padding::same, 2); })},
        {"maxpool2d", probe({6, 6, 2}, [](ModelBuilder& b) { b.maxpool2d("p", 2); })},
        {"dense", probe({5}, [](ModelBuilder& b) { b.dense("d", 4); })},
        {"relu", probe({3, 3, 2}, [](ModelBuilder& b) { b.relu("r"); })},
        {"batchnorm", probe({3, 3, 2}, [](ModelBuilder& b) { b.batchnorm("bn"); })},
        {"dropout", probe({3, 3, 2}, [](ModelBuilder& b) { b.dropout("drop", 0.5); })},
        {"flatten", probe({3, 3, 2}, [](ModelBuilder& b) { b.flatten("f"); })},
        {"softmax", probe({3, 3, 4}, [](ModelBuilder& b) { b.softmax("s"); })},
    };
    double worst = 0;
    std::string worst_name;
    std::uint64_t seed = 1;
    for (const auto& [name, manifest] : kinds) {
      const double e = gradient_error(random_bundle(manifest, seed), seed + 100, 1000);
      if (e >= worst) worst = e, worst_name = name;
      ++seed;
    }
    const double cnn = gradient_error(random_bundle(architectures::reduced_mnist_cnn(), 42, 0.1), 43, 40);
    if (cnn >= worst) worst = cnn, worst_name = "reduced-cnn";
    return Outcome{worst < 1e-4, "max relative error " + fmt(worst, 3) + " (" + worst_name + "), 9 layer kinds + reduced CNN"};
  });

  // The fixture is shared by the model-dependent criteria below.
  LabeledDataset data;
  std::optional<Fixture> fixture_slot;
  bool have_fixture = false;
  report.run("fixture-training", [&] {
    data = read_idx(data_dir / "images-idx3-ubyte", data_dir / "labels-idx1-ubyte");
    FixtureConfig config;
    fixture_slot.emplace(train_fixture(data, config));
    have_fixture = true;
    const auto& fixture = *fixture_slot;
    const auto again = train_fixture(data, config);
    const bool reproducible = again.model == fixture.model && again.epoch_loss == fixture.epoch_loss;
    const double relogged = evaluate_accuracy(fixture.model, fixture.split.second);
    const bool ok = fixture.test_accuracy >= 0.92 && reproducible && relogged == fixture.test_accuracy &&
                    fixture.split.first.size() == 2000 && fixture.split.second.size() == 1000;
    return Outcome{ok, "held-out accuracy " + fmt(fixture.test_accuracy, 4) + " on " +
                           std::to_string(fixture.split.second.size()) + " samples after " +
                           std::to_string(fixture.epoch_loss.size()) + " epochs; bitwise reproducible: " +
                           (reproducible ? "yes" : "no")};
  });

  report.run("attribution-oracle", [] {
    const Shape shape{28, 28, 1};
    const auto fe = FeatureExtractor::identity(shape);
    const auto head = ClassHead::ones(784);
    std::vector<Tensor> support;
    for (std::uint64_t s = 0; s < 5; ++s) support.push_back(random_tensor<float>(shape, 10 + s, 0, 1));
    auto x = random_tensor<float>(shape, 99, 0, 1);
    x.at(13, 7, 0) = 0.0f;
    const auto p = compute_prototype(fe, head, 0, support);
    const auto map = attribution_map(p, fe, head, x);

    std::vector<double> proto(784, 0.0), query(x.values().begin(), x.values().end());
    for (const auto& s : support)
      for (std::size_t i = 0; i < 784; ++i) proto[i] += s[i] / 5.0;
    const double z_ref = brute_cosine(proto, query);
    double worst = 0;
    for (std::size_t i = 0; i < 784; ++i) {
      auto perturbed = query;
      perturbed[i] = 0.0;
      worst = std::max(worst, std::abs(map.values[i] - (z_ref - brute_cosine(proto, perturbed))));
    }
    AttributionOptions same;
    same.reference_value = {x.at(4, 4, 0)};
    const auto at_pixel = attribution_map(p, fe, head, x, same);
    const bool zero_cells = map.at(13, 7) == 0.0 && at_pixel.at(4, 4) == 0.0;
    return Outcome{worst < 1e-5 && zero_cells && map.height == 28 && map.width == 28,
                   "max |delta| vs brute force " + fmt(worst, 3) + " over 784 cells; reference-equal cells exactly 0: " +
                       (zero_cells ? "yes" : "no")};
  });

  report.run("revolving-digit-consistency", [&] {
    if (!have_fixture) return Outcome{false, "fixture unavailable"};
    const auto& fixture = *fixture_slot;
    const auto model = split_model(std::make_shared<const Network<float>>(fixture.model));
    const auto& train_set = fixture.split.first;
    const auto& test_set = fixture.split.second;
    std::vector<ClassReference> refs;
    for (std::size_t c : {0u, 5u, 6u, 9u}) {
      refs.push_back(make_class_reference(model.features, model.head, train_set, select_support_set(train_set, c, 100, 6)));
    }
    const std::size_t query = test_set.indices_of(6).front();
    const auto trace = rotation_sweep(model, refs, test_set.image(query));
    const double ps = trace.protoshot_agreement(), ex = trace.exmatchina_agreement();
    return Outcome{trace.size() == 360 && ps >= ex,
                   "360 steps; ProtoShot agreement " + fmt(ps, 4) + " vs ExMatchina* " + fmt(ex, 4) +
                       "; angle-0 ProtoShot choice " + std::to_string(trace.protoshot_choice(0)) +
                       ", model prediction " + std::to_string(trace.predictions[0])};
  });

  std::vector<double> benign, adversarial;
  report.run("adversarial-detection", [&] {
    if (!have_fixture) return Outcome{false, "fixture unavailable"};
    const auto& fixture = *fixture_slot;
    const auto model = split_model(std::make_shared<const Network<float>>(fixture.model));
    const auto& train_set = fixture.split.first;
    std::vector<Prototype> prototypes;
    for (std::size_t c = 0; c < 10; ++c) {
      prototypes.push_back(
          compute_prototype(model.features, model.head, train_set, select_support_set(train_set, c, 100, 11)));
    }
    const auto dist = score_distributions(model, prototypes, fixture.split.second, 500, 12, 0.15);
    benign = dist.benign;
    adversarial = dist.adversarial;
    double mb = 0, ma = 0;
    for (std::size_t i = 0; i < 500; ++i) mb += benign[i] / 500, ma += adversarial[i] / 500;
    const double auc = detector_roc(benign, adversarial).auc;
    return Outcome{mb > ma && auc >= 0.75, "epsilon 0.15, 500 + 500 samples; mean benign " + fmt(mb, 4) +
                                                " > mean adversarial " + fmt(ma, 4) + "; AUC " + fmt(auc, 4)};
  });

  report.run("roc-hand-case", [] {
    const std::vector<double> b{0.9, 0.8}, a{0.85, 0.1};
    const double auc = detector_roc(b, a).auc;
    // exhaustive enumeration: every threshold that can change a decision
    std::set<double> ts{-INFINITY, INFINITY};
    for (double v : {0.9, 0.8, 0.85, 0.1}) ts.insert(v), ts.insert(std::nextafter(v, INFINITY));
    std::vector<std::pair<double, double>> pts;
    for (double t : ts) {
      double fp = 0, tp = 0;
      for (double v : b) fp += v < t;
      for (double v : a) tp += v < t;
      pts.emplace_back(fp / 2, tp / 2);
    }
    double oracle = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      oracle += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2;
    return Outcome{auc == 0.75 && oracle == 0.75, "AUC " + fmt(auc) + ", enumeration oracle " + fmt(oracle)};
  });

  report.run("scale-rank-invariance", [&] {
    const Shape shape{28, 28, 1};
    FeatureExtractor base = FeatureExtractor::identity(shape);
    ClassHead head = ClassHead::ones(784);
    std::vector<Tensor> support;
    std::vector<Tensor> queries;
    if (have_fixture) {
      const auto& fixture = *fixture_slot;
      const auto model = split_model(std::make_shared<const Network<float>>(fixture.model));
      base = model.features;
      head = model.head;
      for (auto i : select_support_set(fixture.split.first, 3, 20, 5).indices) support.push_back(fixture.split.first.image(i));
      for (std::size_t i = 0; i < 50; ++i) queries.push_back(fixture.split.second.image(i));
    } else {
      for (std::uint64_t s = 0; s < 20; ++s) support.push_back(random_tensor<float>(shape, s, 0, 1));
      for (std::uint64_t s = 0; s < 50; ++s) queries.push_back(random_tensor<float>(shape, 500 + s, 0, 1));
    }
    const std::size_t c = std::min<std::size_t>(3, head.class_count - 1);
    const auto plain = compute_prototype(base, head, c, support);
    double worst = 0;
    for (double k : {1e-3, 0.37, 2.0, 1e3}) {
      const FeatureExtractor scaled(
          [&base, k](const Tensor& x) {
            auto f = base(x);
            for (auto& v : f.values()) v = static_cast<float>(v * k);
            return f;
          },
          base.input_shape(), base.width());
      const auto p = compute_prototype(scaled, head, c, support);
      for (const auto& q : queries) {
        worst = std::max(worst, std::abs(protoshot_score(p, base, head, q).score -
                                         protoshot_score(plain, base, head, q).score));
      }
    }
    std::vector<double> b = benign, a = adversarial;
    if (b.empty()) {
      const auto rb = random_tensor<double>({200}, 1, 0, 1), ra = random_tensor<double>({200}, 2, -0.2, 0.8);
      b.assign(rb.values().begin(), rb.values().end());
      a.assign(ra.values().begin(), ra.values().end());
    }
    const double auc = detector_roc(b, a).auc;
    bool rank_ok = true;
    for (const auto& f : std::vector<std::function<double(double)>>{
             [](double v) { return std::exp(5 * v); }, [](double v) { return 3 * v - 1; },
             [](double v) { return std::atan(v); }, [](double v) { return v * v * v; }}) {
      std::vector<double> tb, ta;
      for (double v : b) tb.push_back(f(v));
      for (double v : a) ta.push_back(f(v));
      rank_ok = rank_ok && detector_roc(tb, ta).auc == auc;
    }
    return Outcome{worst < 1e-6 && rank_ok, "max score change under feature scaling " + fmt(worst, 3) +
                                                 "; AUC unchanged under 4 increasing transforms: " +
                                                 (rank_ok ? "yes" : "no")};
  });

  report.run("format-round-trip", [&] {
    psx::testing::TempDir dir("acceptance");
    std::vector<std::pair<std::string, ModelBundle>> bundles{
        {"mnist_cnn", random_bundle(architectures::mnist_cnn(), 1)},
        {"omniglot_protonet", random_bundle(architectures::omniglot_protonet(), 2)},
        {"reduced_mnist_cnn", random_bundle(architectures::reduced_mnist_cnn(), 3)}};
    if (have_fixture) bundles.emplace_back("trained_fixture", fixture_slot->model);
    std::string names;
    bool ok = true;
    for (const auto& [name, bundle] : bundles) {
      const auto m1 = dir / (name + ".psx"), m2 = dir / (name + "_again.psx");
      save_model(bundle, m1, default_blob_path(m1));
      const auto loaded = load_model(m1, default_blob_path(m1));
      save_model(loaded, m2, default_blob_path(m2));
      const bool same = loaded == bundle && read_file(m1) == read_file(m2) &&
                        read_file(default_blob_path(m1)) == read_file(default_blob_path(m2));
      ok = ok && same;
      names += (names.empty() ? "" : ", ") + name + (same ? "" : " (DIFFERS)");
    }
    if (have_fixture && !save_dir.empty()) {
      std::filesystem::create_directories(save_dir);
      save_model(fixture_slot->model, save_dir / "fixture.psx", save_dir / "fixture.psxb");
    }
    return Outcome{ok, "byte-identical save/load/save for " + names};
  });

  std::cout << (report.failures() == 0 ? "ALL PASS" : std::to_string(report.failures()) + " FAILED") << std::endl;
  return report.failures() == 0 ? 0 : 1;
}
