// Command-line front end: train, attribute, sweep, ablate, adversarial, roc, serve.
#include <CLI11.hpp>
#include <httplib.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "psx/export.hpp"
#include "psx/fixture.hpp"
#include "psx/perturb.hpp"
#include "psx/service.hpp"

using namespace psx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct ModelArgs {
  std::string manifest;
  std::string blob;

  ModelBundle load() const {
    if (manifest.empty()) fail(ErrorCode::invalid_argument, "--manifest is required");
    return load_model(manifest, blob.empty() ? default_blob_path(manifest) : fs::path(blob));
  }
};

void add_model_flags(CLI::App* app, ModelArgs& args) {
  app->add_option("--manifest", args.manifest, "PSX manifest (JSON)")->required();
  app->add_option("--model", args.blob, "PSX weight blob (default: <manifest stem>.psxb)");
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorCode::io, "failed writing " + path.string());
}

fs::path with_suffix(const std::string& base, const std::string& suffix) { return fs::path(base + suffix); }

const Tensor& query_image(const LabeledDataset& data, std::size_t index) {
  if (index >= data.size()) {
    fail(ErrorCode::invalid_argument, "query index " + std::to_string(index) + " out of range for " +
                                          std::to_string(data.size()) + " samples");
  }
  return data.image(index);
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ProtoShot prototype-similarity explanations for CNN classifiers"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the reduced MNIST CNN fixture and save it as PSX");
  std::string train_data, train_out;
  FixtureConfig fixture;
  std::string optimizer = "adam";
  train_cmd->add_option("--data", train_data, "dataset: IDX directory, 'images,labels' pair or PGM class root")
      ->required();
  train_cmd->add_option("--out", train_out, "output manifest path (blob written alongside)")->required();
  train_cmd->add_option("--seed", fixture.seed, "seed for split, initialization, shuffling and dropout");
  train_cmd->add_option("--epochs", fixture.train.epochs);
  train_cmd->add_option("--lr", fixture.train.learning_rate);
  train_cmd->add_option("--batch", fixture.train.batch_size);
  train_cmd->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  train_cmd->add_option("--train-count", fixture.train_count);
  train_cmd->add_option("--test-count", fixture.test_count);

  // common experiment flags
  ModelArgs model_args;
  std::string data_spec;
  std::size_t class_index = 0, support_n = 100, query_index = 0, patch = 1;
  std::uint64_t seed = 0;
  std::string out;

  auto* attribute_cmd = app.add_subcommand("attribute", "Occlusion attribution map for one query");
  add_model_flags(attribute_cmd, model_args);
  attribute_cmd->add_option("--data", data_spec)->required();
  attribute_cmd->add_option("--class", class_index, "class of the support set")->required();
  attribute_cmd->add_option("--seed", seed, "support selection seed");
  attribute_cmd->add_option("--n", support_n, "support set size");
  attribute_cmd->add_option("--index", query_index, "query sample index in --data");
  attribute_cmd->add_option("--patch", patch, "occlusion patch size")->check(CLI::PositiveNumber);
  std::vector<float> reference_value;
  attribute_cmd->add_option("--reference", reference_value, "reference pixel value per channel");
  std::size_t png_scale = 8;
  attribute_cmd->add_option("--png-scale", png_scale, "pixels per map cell in the PNG");
  attribute_cmd->add_option("--out", out, "output prefix (.csv and .png)")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Rotation sweep of one query against class prototypes");
  add_model_flags(sweep_cmd, model_args);
  sweep_cmd->add_option("--data", data_spec)->required();
  std::vector<std::size_t> classes{0, 5, 6, 9};
  double step = 1.0;
  sweep_cmd->add_option("--classes", classes, "classes of interest")->delimiter(',');
  sweep_cmd->add_option("--seed", seed);
  sweep_cmd->add_option("--n", support_n);
  sweep_cmd->add_option("--index", query_index);
  sweep_cmd->add_option("--step", step, "angle step in degrees");
  sweep_cmd->add_option("--out", out, "output prefix (.csv and .json)")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Score drops when masked regions are set to 0");
  add_model_flags(ablate_cmd, model_args);
  ablate_cmd->add_option("--data", data_spec)->required();
  ablate_cmd->add_option("--class", class_index)->required();
  ablate_cmd->add_option("--seed", seed);
  ablate_cmd->add_option("--n", support_n);
  ablate_cmd->add_option("--index", query_index);
  std::vector<std::string> mask_paths;
  ablate_cmd->add_option("--mask", mask_paths, "PGM mask (nonzero = ablate), repeatable")->required();
  ablate_cmd->add_option("--out", out, "output CSV");

  auto* adversarial_cmd = app.add_subcommand("adversarial", "In-class scores of benign and FGSM samples");
  add_model_flags(adversarial_cmd, model_args);
  adversarial_cmd->add_option("--data", data_spec, "samples to attack")->required();
  std::string support_spec;
  adversarial_cmd->add_option("--support-data", support_spec, "prototype source (default: --data)");
  std::size_t sample_n = 500;
  double epsilon = kDefaultEpsilon;
  std::uint64_t support_seed = 0;
  adversarial_cmd->add_option("--samples", sample_n, "number of seeded samples");
  adversarial_cmd->add_option("--seed", seed);
  adversarial_cmd->add_option("--support-seed", support_seed);
  adversarial_cmd->add_option("--n", support_n, "support set size per class");
  adversarial_cmd->add_option("--epsilon", epsilon)->check(CLI::NonNegativeNumber);
  adversarial_cmd->add_option("--out", out, "output CSV (index,label,benign,adversarial)")->required();

  auto* roc_cmd = app.add_subcommand("roc", "ROC of the score-threshold detector");
  std::string scores_path;
  roc_cmd->add_option("--scores", scores_path, "CSV from 'adversarial'")->required();
  roc_cmd->add_option("--out", out, "output prefix (.csv and .json)");

  auto* serve_cmd = app.add_subcommand("serve", "HTTP service");
  std::vector<std::string> serve_models, serve_data;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t workers = 1;
  serve_cmd->add_option("--manifest", serve_models, "PSX manifest to register, repeatable");
  serve_cmd->add_option("--data", serve_data, "dataset as id=spec, repeatable");
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--port", port);
  serve_cmd->add_option("--workers", workers, "job worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_body(ErrorCode::invalid_argument, e.what()).dump() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      if (optimizer == "sgd") fixture.train.optimizer = OptimizerKind::sgd;
      const auto data = open_dataset(train_data);
      const auto result = train_fixture(data, fixture, [](std::size_t step, std::size_t total) {
        if (step == total || step % 50 == 0) std::cerr << "step " << step << "/" << total << "\n";
      });
      ensure_parent(train_out);
      save_model(result.model, train_out, default_blob_path(train_out));
      write_text(with_suffix(train_out, ".loss.csv"), loss_history_csv(result.epoch_loss));
      print({{"manifest", train_out},
             {"blob", default_blob_path(train_out).string()},
             {"test_accuracy", result.test_accuracy},
             {"epoch_loss", result.epoch_loss}});
    } else if (attribute_cmd->parsed()) {
      const auto bundle = model_args.load();
      const auto model = split_model(bundle);
      const auto data = open_dataset(data_spec);
      const auto support = select_support_set(data, class_index, support_n, seed);
      const auto prototype = compute_prototype(model.features, model.head, data, support);
      const auto& x = query_image(data, query_index);
      AttributionOptions options;
      options.patch_size = patch;
      options.reference_value = reference_value;
      if (options.reference_value.empty() && x.dim(2) > 1) options.reference_value = data.channel_mean();
      const auto map = attribution_map(prototype, model.features, model.head, x, options);
      ensure_parent(with_suffix(out, ".csv"));
      write_map_csv(map, with_suffix(out, ".csv"));
      write_heatmap_png(map, with_suffix(out, ".png"), png_scale);
      print({{"reference_score", map.reference_score},
             {"color_bound", normalize_for_display(map.values).color_bound},
             {"height", map.height},
             {"width", map.width},
             {"csv", with_suffix(out, ".csv").string()},
             {"png", with_suffix(out, ".png").string()}});
    } else if (sweep_cmd->parsed()) {
      const auto bundle = model_args.load();
      const auto model = split_model(bundle);
      const auto data = open_dataset(data_spec);
      std::vector<ClassReference> refs;
      for (auto c : classes) {
        refs.push_back(make_class_reference(model.features, model.head, data, select_support_set(data, c, support_n, seed)));
      }
      SweepOptions options;
      options.step_degrees = step;
      const auto trace = rotation_sweep(model, refs, query_image(data, query_index), options);
      write_text(with_suffix(out, ".csv"), sweep_to_csv(trace));
      write_text(with_suffix(out, ".json"), sweep_to_json(trace));
      print({{"steps", trace.size()},
             {"protoshot_agreement", trace.protoshot_agreement()},
             {"exmatchina_agreement", trace.exmatchina_agreement()}});
    } else if (ablate_cmd->parsed()) {
      const auto bundle = model_args.load();
      const auto model = split_model(bundle);
      const auto data = open_dataset(data_spec);
      const auto prototype =
          compute_prototype(model.features, model.head, data, select_support_set(data, class_index, support_n, seed));
      const auto& x = query_image(data, query_index);
      std::vector<RegionMask> masks;
      for (const auto& path : mask_paths) {
        const auto pgm = read_pgm(path);
        RegionMask mask{fs::path(path).stem().string(), pgm.height, pgm.width, {}};
        for (auto v : pgm.pixels) mask.cells.push_back(v != 0);
        masks.push_back(std::move(mask));
      }
      const auto results = region_ablation(prototype, model.features, model.head, x, masks);
      std::ostringstream csv;
      csv.precision(12);
      csv << "id,score,drop\n";
      json list = json::array();
      for (const auto& r : results) {
        csv << r.id << ',' << r.score << ',' << results.front().score - r.score << '\n';
        list.push_back({{"id", r.id}, {"score", r.score}});
      }
      if (!out.empty()) write_text(out, csv.str());
      print({{"results", list}});
    } else if (adversarial_cmd->parsed()) {
      const auto bundle = model_args.load();
      const auto network = std::make_shared<const Network<float>>(bundle);
      const auto model = split_model(network);
      const auto data = open_dataset(data_spec);
      const auto support_data = support_spec.empty() ? data : open_dataset(support_spec);
      std::vector<Prototype> prototypes;
      for (std::size_t c = 0; c < model.head.class_count; ++c) {
        prototypes.push_back(compute_prototype(model.features, model.head, support_data,
                                               select_support_set(support_data, c, support_n, support_seed)));
      }
      const auto dist = score_distributions(model, prototypes, data, sample_n, seed, epsilon);
      std::ostringstream csv;
      csv.precision(17);
      csv << "index,label,benign,adversarial\n";
      double mb = 0, ma = 0;
      for (std::size_t k = 0; k < dist.indices.size(); ++k) {
        csv << dist.indices[k] << ',' << data.label(dist.indices[k]) << ',' << dist.benign[k] << ','
            << dist.adversarial[k] << '\n';
        mb += dist.benign[k] / static_cast<double>(dist.indices.size());
        ma += dist.adversarial[k] / static_cast<double>(dist.indices.size());
      }
      write_text(out, csv.str());
      print({{"samples", dist.indices.size()},
             {"epsilon", epsilon},
             {"mean_benign", mb},
             {"mean_adversarial", ma},
             {"auc", detector_roc(dist.benign, dist.adversarial).auc},
             {"csv", out}});
    } else if (roc_cmd->parsed()) {
      std::ifstream in(scores_path);
      if (!in) fail(ErrorCode::io, "cannot open " + scores_path);
      std::string line;
      std::getline(in, line);
      const auto header = split_csv_line(line);
      const auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) fail(ErrorCode::format, scores_path + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
      };
      const auto bcol = column("benign"), acol = column("adversarial");
      std::vector<double> benign, adversarial;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) fail(ErrorCode::format, scores_path + ": ragged row");
        benign.push_back(std::stod(cells[bcol]));
        adversarial.push_back(std::stod(cells[acol]));
      }
      const auto roc = detector_roc(benign, adversarial);
      if (!out.empty()) {
        write_text(with_suffix(out, ".csv"), roc_to_csv(roc));
        write_text(with_suffix(out, ".json"), roc_to_json(roc));
      }
      print({{"auc", roc.auc}, {"points", roc.points.size()}});
    } else if (serve_cmd->parsed()) {
      Service service(workers);
      for (const auto& path : serve_models) service.load_model(path);
      for (const auto& entry : serve_data) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos || eq == 0) fail(ErrorCode::invalid_argument, "--data expects id=spec, got " + entry);
        service.add_dataset(entry.substr(0, eq), open_dataset(entry.substr(eq + 1)));
      }
      httplib::Server server;
      install_routes(server, service);
      static httplib::Server* running = &server;
      std::signal(SIGINT, [](int) { running->stop(); });
      std::signal(SIGTERM, [](int) { running->stop(); });
      std::cerr << "listening on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) fail(ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const Error& e) {
    std::cerr << error_body(e.code(), e.what()).dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << error_body(ErrorCode::io, e.what()).dump() << "\n";
    return 1;
  }
  return 0;
}
