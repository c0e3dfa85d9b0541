#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nptt/checkpoint.hpp"
#include "nptt/data.hpp"
#include "nptt/explain.hpp"
#include "nptt/model.hpp"
#include "nptt/refine.hpp"
#include "nptt/trainer.hpp"
#include "selftest.hpp"

namespace fs = std::filesystem;
using namespace nptt;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kMissingFile = 3, kVersion = 4 };

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_path(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingFile(what + " '" + path + "' does not exist");
}

// Prefers `<dir>/<split>` when the directory holds generated splits.
Dataset load_split(const std::string& dir, const std::string& split) {
  require_path(dir, "data directory");
  const fs::path nested = fs::path(dir) / split;
  if (fs::is_directory(nested)) return load_dataset_dir(nested.string(), split);
  return load_dataset_dir(dir, split);
}

ProtoTreeModel load_model(const std::string& path) {
  require_path(path, "checkpoint");
  return ProtoTreeModel::load(path);
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

void save_model(const ProtoTreeModel& model, const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  model.save(path);
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string test_data;
  std::string out;
  std::string metrics;
  std::vector<std::string> sets;
  std::map<std::string, std::string> named;
};

int cmd_train(TrainArgs& a) {
  std::map<std::string, std::string> values;
  if (!a.config.empty()) {
    require_path(a.config, "config");
    std::ifstream in(a.config);
    std::stringstream buf;
    buf << in.rdbuf();
    values = parse_key_values(buf.str());
  }
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + s + "'");
    values[s.substr(0, eq)] = s.substr(eq + 1);
  }
  for (const auto& [k, v] : a.named) {
    if (!v.empty()) values[k] = v;
  }

  const Dataset train_set = load_split(a.data, "train");
  std::optional<Dataset> test_set;
  if (!a.test_data.empty()) {
    test_set = load_split(a.test_data, "test");
  } else if (fs::is_directory(fs::path(a.data) / "test")) {
    test_set = load_split(a.data, "test");
  }

  TrainConfig config;
  // The input size follows the data unless the config pins it.
  if (!values.contains("input_side")) values["input_side"] = std::to_string(train_set.side);
  apply_config(values, config);

  std::string csv = metrics_csv_header() + "\n";
  const auto result = train(train_set, test_set ? &*test_set : nullptr, config, [&](const EpochMetrics& m) {
    csv += metrics_csv_row(m) + "\n";
    std::cout << "epoch=" << m.epoch << " loss=" << pct(m.mean_loss) << " train_acc=" << pct(m.train_accuracy);
    if (m.test_accuracy) std::cout << " test_acc=" << pct(*m.test_accuracy);
    std::cout << std::endl;
  });
  save_model(result.model, a.out);
  if (!a.metrics.empty()) write_text(a.metrics, csv);
  std::cout << "saved=" << a.out << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& strategy_text) {
  const Strategy strategy = parse_strategy(strategy_text);
  const auto model = load_model(ckpt);
  const Dataset data = load_split(data_dir, "test");
  const Inference inf = infer(model, data);
  const auto predicted = predict_classes(model, inf, strategy);
  std::cout << "strategy=" << strategy_name(strategy) << " accuracy=" << pct(accuracy(predicted, data.labels))
            << " fidelity=" << pct(fidelity(model, inf, strategy)) << "\n";
  if (strategy != Strategy::soft) {
    const auto stats = path_length_stats(model.tree, inf);
    std::cout << "path_length_mean=" << pct(stats.mean) << " path_length_std=" << pct(stats.stddev)
              << " path_length_min=" << stats.min << " path_length_max=" << stats.max << "\n";
  }
  return kOk;
}

int cmd_prune(const std::string& ckpt, std::optional<double> tau, const std::string& out, const std::string& report) {
  auto model = load_model(ckpt);
  const double t = tau.value_or(default_prune_threshold(model.num_classes()));
  const auto r = prune(model, t);
  save_model(model, out);
  if (!report.empty()) write_text(report, prune_report_csv(r));
  std::cout << "tau=" << pct(t) << " leaves_removed=" << r.leaves_removed << " internal_removed=" << r.internal_removed
            << " leaves_left=" << model.tree.topology().num_leaves() << "\n";
  if (r.tau_not_above_uniform) std::cout << "warning=tau_not_above_uniform\n";
  return kOk;
}

int cmd_project(const std::string& ckpt, const std::string& data_dir, bool constrained, const std::string& out,
                const std::string& report) {
  auto model = load_model(ckpt);
  const Dataset data = load_split(data_dir, "train");
  const auto records = project(model, data, constrained);
  save_model(model, out);
  if (!report.empty()) write_text(report, projection_csv(records));
  std::size_t fallbacks = 0;
  for (const auto& r : records) fallbacks += r.fell_back ? 1 : 0;
  std::cout << "projected=" << records.size() << " constrained=" << (constrained ? 1 : 0)
            << " mean_distance=" << mean_projection_distance(records) << " fallbacks=" << fallbacks << "\n";
  return kOk;
}

int cmd_visualize(const std::string& ckpt, const std::string& out_dir) {
  const auto model = load_model(ckpt);
  const auto graph = export_tree(model, out_dir);
  std::cout << "nodes=" << graph.nodes.size() << " files=" << graph.files.size() << " out_dir=" << out_dir << "\n";
  return kOk;
}

int cmd_explain(const std::string& ckpt, const std::string& image_path, const std::string& out_dir) {
  const auto model = load_model(ckpt);
  require_path(image_path, "image");
  const Image image = load_ppm(image_path);
  ExportOptions options;
  options.sample_name = fs::path(image_path).stem().string();
  const auto graph = export_tree(model, out_dir, &image, options);
  const auto& path = *graph.sample_path;
  std::cout << "predicted=" << argmax(path.distribution) << " leaf=" << path.leaf << " depth=" << path.path.size()
            << " report=" << (fs::path(out_dir) / ("explain_" + options.sample_name + ".html")).string() << "\n";
  return kOk;
}

int cmd_ensemble(const std::vector<std::string>& ckpts, const std::string& data_dir) {
  std::vector<ProtoTreeModel> models;
  for (const auto& c : ckpts) models.push_back(load_model(c));
  const Dataset data = load_split(data_dir, "test");
  std::vector<const ProtoTreeModel*> ptrs;
  double sum = 0;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const double acc = soft_accuracy(models[i], data);
    sum += acc;
    ptrs.push_back(&models[i]);
    std::cout << "model=" << ckpts[i] << " accuracy=" << pct(acc) << "\n";
  }
  std::cout << "ensemble_accuracy=" << pct(ensemble_accuracy(ptrs, data))
            << " mean_individual=" << pct(sum / static_cast<double>(models.size())) << "\n";
  return kOk;
}

int cmd_gen_data(std::size_t k, std::size_t n, std::size_t test_n, std::size_t side, std::uint64_t seed,
                 const std::string& out) {
  SyntheticOptions o;
  o.num_classes = k;
  o.train_per_class = n;
  o.test_per_class = test_n;
  o.side = side;
  o.seed = seed;
  const auto [train_set, test_set] = gen_synthetic(o);
  save_dataset_dir(train_set, (fs::path(out) / "train").string());
  save_dataset_dir(test_set, (fs::path(out) / "test").string());
  std::cout << "train=" << train_set.size() << " test=" << test_set.size() << " out=" << out << "\n";
  return kOk;
}

int fail(int code, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::cerr << "error code=" << code << " kind=" << kind << " message=\"" << flat << "\"" << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural prototype tree: train, evaluate, prune, project, explain"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--config", ta.config, "key = value config file");
  train->add_option("--data", ta.data, "Training data directory (uses <dir>/train when present)")->required();
  train->add_option("--test-data", ta.test_data, "Test data directory reported each epoch (default <data>/test)");
  train->add_option("--out", ta.out, "Checkpoint path to write")->required();
  train->add_option("--metrics", ta.metrics, "Per-epoch metrics CSV path");
  train->add_option("--set", ta.sets, "Config override key=value, repeatable");
  for (const auto& [flag, key, help] : std::vector<std::tuple<std::string, std::string, std::string>>{
           {"--epochs", "epochs", "Number of epochs"},
           {"--seed", "seed", "Random seed"},
           {"--height", "height", "Tree height"},
           {"--batch-size", "batch_size", "Mini-batch size"}}) {
    train->add_option(flag, ta.named[key], help);
  }

  std::string ckpt, data, out, out_dir, report, image, strategy = "soft";
  std::optional<double> tau;
  bool constrained = true;
  std::vector<std::string> ckpts;

  auto* eval = app.add_subcommand("eval", "Report accuracy and fidelity of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  eval->add_option("--data", data, "Data directory (uses <dir>/test when present)")->required();
  eval->add_option("--strategy", strategy, "soft, max_path or greedy")->check(
      CLI::IsMember({"soft", "max_path", "greedy"}));

  auto* prune_cmd = app.add_subcommand("prune", "Remove leaves whose largest class probability is at most tau");
  prune_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  prune_cmd->add_option("--tau", tau, "Threshold (default max(0.01, 1.2 / K))");
  prune_cmd->add_option("--out", out, "Pruned checkpoint path")->required();
  prune_cmd->add_option("--report", report, "Pruning report CSV path");

  auto* project_cmd = app.add_subcommand("project", "Replace prototypes with their nearest training patches");
  project_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  project_cmd->add_option("--data", data, "Training data directory (uses <dir>/train when present)")->required();
  project_cmd->add_flag("--constrained,!--unconstrained", constrained,
                        "Search only images whose class the subtree predicts (default) or every image");
  project_cmd->add_option("--out", out, "Projected checkpoint path")->required();
  project_cmd->add_option("--report", report, "Projection CSV path");

  auto* vis = app.add_subcommand("visualize", "Export the tree as DOT and HTML with prototype patches");
  vis->add_option("--ckpt", ckpt, "Projected checkpoint path")->required();
  vis->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* explain = app.add_subcommand("explain", "Export the tree and the decision path of one image");
  explain->add_option("--ckpt", ckpt, "Projected checkpoint path")->required();
  explain->add_option("--image", image, "PPM image to explain")->required();
  explain->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* ensemble = app.add_subcommand("ensemble-eval", "Accuracy of the averaged prediction of several checkpoints");
  ensemble->add_option("--ckpt", ckpts, "Checkpoint path, repeatable")->required();
  ensemble->add_option("--data", data, "Data directory (uses <dir>/test when present)")->required();

  std::size_t gk = 8, gn = 200, gtest = 100, gside = 64;
  std::uint64_t gseed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic part-based dataset as train/ and test/");
  gen->add_option("--k", gk, "Number of classes")->required();
  gen->add_option("--n", gn, "Training images per class")->required();
  gen->add_option("--test-n", gtest, "Test images per class");
  gen->add_option("--side", gside, "Image side in pixels");
  gen->add_option("--seed", gseed, "Random seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* selftest = app.add_subcommand("selftest", "Gradient checks and oracle equivalences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ckpt, data, strategy);
    if (*prune_cmd) return cmd_prune(ckpt, tau, out, report);
    if (*project_cmd) return cmd_project(ckpt, data, constrained, out, report);
    if (*vis) return cmd_visualize(ckpt, out_dir);
    if (*explain) return cmd_explain(ckpt, image, out_dir);
    if (*ensemble) return cmd_ensemble(ckpts, data);
    if (*gen) return cmd_gen_data(gk, gn, gtest, gside, gseed, out);
    if (*selftest) {
      const int failures = nptt_selftest::run(std::cout);
      if (failures > 0) return fail(kFailure, "selftest", std::to_string(failures) + " check(s) failed");
      return kOk;
    }
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  } catch (const MissingFile& e) {
    return fail(kMissingFile, "missing_file", e.what());
  } catch (const CheckpointVersionError& e) {
    return fail(kVersion, "version_mismatch", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "runtime", e.what());
  }
  return kOk;
}
