// fpc: train, evaluate and explain ultrasound fetal-plane classifiers.
//
// Subcommands: synth, split, train, eval, explain, export-embeddings.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fpc/fpc.hpp"

namespace {

struct CliOptions {
  // global
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string dtype = "f32";
  bool quiet = false;
  int threads = 2;
  std::vector<std::string> overrides;  // key=value pairs

  std::string command;

  // synth
  std::string out_dir;
  int classes = 6;
  int per_class = 100;
  int resolution = 64;

  // split
  std::string data_path;
  std::string train_out, test_out;
  double fraction = 0.8;
  bool patient_wise = false;

  // train
  std::string model_out;
  std::string log_path;

  // eval
  std::string model_path;
  std::string report_path;
  std::string roc_path;
  bool print_table = false;

  // explain
  std::string image_path;
  std::string heat_out;
  std::string overlay_out;
  std::string csv_out;
  std::optional<int> target;
  double alpha = 0.5;
  bool use_probability = false;
  bool post_attention = false;

  // export-embeddings
  std::string embed_out;
};

fpc::KeyValues parse_overrides(const std::vector<std::string>& sets) {
  fpc::KeyValues kv;
  for (const auto& s : sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw fpc::usage_error("--set expects key=value, got '" + s + "'");
    kv.emplace_back(fpc::trim(s.substr(0, eq)), fpc::trim(s.substr(eq + 1)));
  }
  return kv;
}

void load_configs(const CliOptions& opt, fpc::ModelConfig& mc, fpc::TrainConfig& tc) {
  if (!opt.config_path.empty())
    fpc::apply_config(fpc::parse_config_file(opt.config_path), mc, tc);
  fpc::apply_config(parse_overrides(opt.overrides), mc, tc);
  if (opt.seed) tc.seed = *opt.seed;
}

template <class T>
int run(const CliOptions& opt) {
  using namespace fpc;
  runtime::set_threads(opt.threads);

  if (opt.command == "synth") {
    auto result = synth_dataset(opt.out_dir, opt.classes, opt.per_class, opt.resolution,
                                opt.seed.value_or(0));
    if (!opt.quiet)
      std::cout << "wrote " << result.manifest.records.size() << " images and "
                << opt.out_dir << "/manifest.csv\n";
    return 0;
  }

  if (opt.command == "split") {
    auto manifest = load_manifest(opt.data_path);
    auto [train, test] =
        stratified_split(manifest, opt.fraction, opt.seed.value_or(0), opt.patient_wise);
    // Relative image paths stay valid from each output manifest's directory.
    const std::filesystem::path src_base = manifest_dir(opt.data_path);
    auto rebase = [&](DatasetManifest& m, const std::string& out_path) {
      const std::filesystem::path out_base =
          std::filesystem::absolute(out_path).parent_path();
      for (auto& rec : m.records) {
        std::filesystem::path p(rec.path);
        if (p.is_relative())
          rec.path = std::filesystem::proximate(
                         std::filesystem::absolute(src_base / p), out_base)
                         .string();
      }
      save_manifest(m, out_path);
    };
    rebase(train, opt.train_out);
    rebase(test, opt.test_out);
    if (!opt.quiet)
      std::cout << "train " << train.records.size() << " / test " << test.records.size()
                << "\n";
    return 0;
  }

  if (opt.command == "train") {
    ModelConfig mc;
    TrainConfig tc;
    load_configs(opt, mc, tc);
    BackboneConfig bc = resolve_backbone(mc.backbone);
    Model<T> model = build_model<T>(mc, bc, tc.seed);
    auto counts = model.counts();
    if (!opt.quiet) {
      std::cout << "parameters: backbone " << counts.backbone << ", attention "
                << counts.attention << ", head " << counts.head << ", total "
                << counts.total() << " (backbone+head " << counts.backbone_plus_head()
                << ")\n";
    }
    auto manifest = load_manifest(opt.data_path);
    auto samples = load_samples<T>(manifest, manifest_dir(opt.data_path),
                                   bc.input_resolution, bc.in_channels);
    std::ofstream log;
    if (!opt.log_path.empty()) {
      log.open(opt.log_path);
      if (!log) throw data_error("cannot write log '" + opt.log_path + "'");
    }
    auto on_epoch = [&](const EpochLog& e) {
      nlohmann::json j{{"epoch", e.epoch},
                       {"loss", e.mean_loss},
                       {"accuracy", e.accuracy},
                       {"seconds", e.seconds},
                       {"steps", e.steps}};
      if (log.is_open()) log << j.dump() << '\n';
      if (!opt.quiet) std::cout << j.dump() << '\n';
    };
    train_loop(model, samples, tc, on_epoch);
    save_model(model, opt.model_out);
    if (!opt.quiet) std::cout << "saved " << opt.model_out << '\n';
    return 0;
  }

  if (opt.command == "eval") {
    Model<T> model = load_model<T>(opt.model_path);
    auto manifest = load_manifest(opt.data_path);
    auto samples = load_samples<T>(manifest, manifest_dir(opt.data_path),
                                   model.input_resolution(), model.input_channels());
    MetricsReport report = evaluate_model(model, samples, manifest.vocabulary);
    if (!opt.report_path.empty()) {
      std::ofstream out(opt.report_path);
      if (!out) throw data_error("cannot write report '" + opt.report_path + "'");
      out << report_to_json(report).dump(2) << '\n';
    }
    if (!opt.roc_path.empty()) {
      std::ofstream out(opt.roc_path);
      if (!out) throw data_error("cannot write ROC CSV '" + opt.roc_path + "'");
      out << "label,threshold,fpr,tpr\n";
      std::vector<int> truth(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) truth[i] = samples[i].label;
      auto probs = predict_probs(model, samples);
      for (int c = 0; c < static_cast<int>(manifest.vocabulary.size()); ++c)
        for (const auto& p : roc_curve(probs, truth, c))
          out << manifest.vocabulary[static_cast<std::size_t>(c)] << ',' << p.threshold
              << ',' << p.fpr << ',' << p.tpr << '\n';
    }
    if (opt.print_table || !opt.quiet) std::cout << report_to_table(report);
    return 0;
  }

  if (opt.command == "explain") {
    Model<T> model = load_model<T>(opt.model_path);
    Tensor<T> image = load_image<T>(opt.image_path, model.input_resolution(),
                                    model.input_channels());
    GradCamOptions gopt;
    gopt.target_class = opt.target;
    gopt.use_probability = opt.use_probability;
    gopt.post_attention = opt.post_attention;
    Heatmap<T> hm = gradcam(model, image, gopt);
    if (!opt.heat_out.empty()) {
      std::vector<double> gray(static_cast<std::size_t>(hm.values.numel()));
      for (std::size_t i = 0; i < gray.size(); ++i)
        gray[i] = static_cast<double>(hm.values.data()[i]);
      save_gray_image(opt.heat_out, gray, hm.values.dim(0), hm.values.dim(1));
    }
    if (!opt.overlay_out.empty()) {
      auto rgb = overlay(hm.values, image, opt.alpha);
      save_rgb_image(opt.overlay_out, rgb, hm.values.dim(0), hm.values.dim(1));
    }
    if (!opt.csv_out.empty()) heatmap_to_csv(hm.values, opt.csv_out);
    if (!opt.quiet)
      std::cout << "predicted class " << hm.predicted_class << ", explained class "
                << hm.target_class << '\n';
    return 0;
  }

  if (opt.command == "export-embeddings") {
    Model<T> model = load_model<T>(opt.model_path);
    auto manifest = load_manifest(opt.data_path);
    std::ofstream out(opt.embed_out);
    if (!out) throw data_error("cannot write embeddings '" + opt.embed_out + "'");
    out << "path,label";
    for (int j = 0; j < model.config.mlp_h2; ++j) out << ",e" << j;
    out << '\n';
    const std::string base = manifest_dir(opt.data_path);
    for (const auto& rec : manifest.records) {
      std::filesystem::path p(rec.path);
      if (p.is_relative() && !base.empty()) p = std::filesystem::path(base) / p;
      Tensor<T> img = load_image<T>(p.string(), model.input_resolution(),
                                    model.input_channels());
      Tensor<T> emb = model.extract_embedding(
          img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
      out << rec.path << ',' << rec.label;
      for (int j = 0; j < model.config.mlp_h2; ++j)
        out << ',' << static_cast<double>(emb.at({0, j}));
      out << '\n';
    }
    if (!opt.quiet)
      std::cout << "wrote " << manifest.records.size() << " embeddings to " << opt.embed_out
                << '\n';
    return 0;
  }

  throw fpc::usage_error("no subcommand selected");
}

}  // namespace

int main(int argc, char** argv) {
  CliOptions opt;
  CLI::App app{"ultrasound fetal-plane classification engine"};
  app.require_subcommand(1);
  app.add_option("--config", opt.config_path, "key = value config file");
  app.add_option("--seed", opt.seed, "global random seed");
  app.add_option("--dtype", opt.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--quiet", opt.quiet, "suppress progress output");
  app.add_option("--threads", opt.threads, "worker threads for tensor ops");
  app.add_option("--set", opt.overrides, "override a config key, e.g. --set epochs=5");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", opt.out_dir, "output directory")->required();
  synth->add_option("--classes", opt.classes, "number of classes (1-6)");
  synth->add_option("--per-class", opt.per_class, "images per class");
  synth->add_option("--resolution", opt.resolution, "image resolution");

  auto* split = app.add_subcommand("split", "stratified train/test split");
  split->add_option("--data", opt.data_path, "input manifest CSV")->required();
  split->add_option("--train-out", opt.train_out, "train manifest path")->required();
  split->add_option("--test-out", opt.test_out, "test manifest path")->required();
  split->add_option("--fraction", opt.fraction, "train fraction (default 0.8)");
  split->add_flag("--patient-wise", opt.patient_wise, "assign whole patients");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", opt.data_path, "train manifest CSV")->required();
  train->add_option("--out", opt.model_out, "output model archive")->required();
  train->add_option("--log", opt.log_path, "per-epoch JSONL log path");

  auto* eval = app.add_subcommand("eval", "evaluate a model on a manifest");
  eval->add_option("--model", opt.model_path, "model archive")->required();
  eval->add_option("--data", opt.data_path, "test manifest CSV")->required();
  eval->add_option("--report", opt.report_path, "metrics JSON output path");
  eval->add_option("--roc", opt.roc_path, "ROC curve CSV output path");
  eval->add_flag("--table", opt.print_table, "print the plain-text table");

  auto* explain = app.add_subcommand("explain", "gradcam heatmap for one image");
  explain->add_option("--model", opt.model_path, "model archive")->required();
  explain->add_option("--image", opt.image_path, "input image")->required();
  explain->add_option("--out", opt.heat_out, "heatmap image output (.png/.pgm)");
  explain->add_option("--overlay", opt.overlay_out, "overlay image output (.png/.ppm)");
  explain->add_option("--csv", opt.csv_out, "raw heatmap values CSV");
  explain->add_option("--target", opt.target, "class to explain (default: predicted)");
  explain->add_option("--alpha", opt.alpha, "overlay blend weight (default 0.5)");
  explain->add_flag("--use-probability", opt.use_probability,
                    "differentiate the probability instead of the logit");
  explain->add_flag("--post-attention", opt.post_attention,
                    "target the feature map after attention");

  auto* embed = app.add_subcommand("export-embeddings", "write penultimate activations");
  embed->add_option("--model", opt.model_path, "model archive")->required();
  embed->add_option("--data", opt.data_path, "manifest CSV")->required();
  embed->add_option("--out", opt.embed_out, "output CSV")->required();

  // Global flags may appear after the subcommand.
  for (auto* sub : {synth, split, train, eval, explain, embed}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  for (auto* sub : {synth, split, train, eval, explain, embed})
    if (sub->parsed()) opt.command = sub->get_name();

  try {
    if (opt.dtype == "f64") return run<double>(opt);
    return run<float>(opt);
  } catch (const fpc::usage_error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const fpc::numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const fpc::data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fpc::shape_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
