// SPDX-License-Identifier: Apache-2.0
#include "rankuncert/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "rankuncert/checkpoint.hpp"
#include "rankuncert/data.hpp"
#include "rankuncert/error.hpp"
#include "rankuncert/evaluation.hpp"
#include "rankuncert/gradcheck.hpp"
#include "rankuncert/training.hpp"

namespace rankuncert {

namespace {

namespace fs = std::filesystem;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct DataPaths {
  std::string images, texts, manifest;
  CLI::Option* images_opt = nullptr;

  void add(CLI::App* app, bool required) {
    images_opt = app->add_option("--images", images, "image embedding store (.emb)")
                     ->check(CLI::ExistingFile);
    auto* t = app->add_option("--texts", texts, "text embedding store (.emb)")
                  ->check(CLI::ExistingFile);
    auto* m = app->add_option("--manifest", manifest, "triplet manifest (.jsonl)")
                  ->check(CLI::ExistingFile);
    if (required) {
      images_opt->required();
      t->required();
      m->required();
    } else {
      images_opt->needs(t)->needs(m);
    }
  }
  bool given() const { return images_opt->count() > 0; }
};

struct LoadedData {
  std::shared_ptr<const EmbeddingStore> images;
  std::shared_ptr<const EmbeddingStore> texts;
  std::vector<TripletRecord> manifest;

  Dataset split(std::optional<Split> s) const { return resolve_triplets(manifest, s, images, texts); }
  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(
        manifest.begin(), manifest.end(), [s](const TripletRecord& r) { return r.split == s; }));
  }
};

LoadedData load_data(const DataPaths& paths) {
  LoadedData d;
  d.images = std::make_shared<const EmbeddingStore>(load_store(paths.images));
  d.texts = std::make_shared<const EmbeddingStore>(load_store(paths.texts));
  d.manifest = load_manifest(paths.manifest);
  return d;
}

LoadedData from_world(SyntheticWorld world) {
  LoadedData d;
  d.images = std::make_shared<const EmbeddingStore>(std::move(world.images));
  d.texts = std::make_shared<const EmbeddingStore>(std::move(world.texts));
  d.manifest = std::move(world.manifest);
  return d;
}

int env_threads(CLI::Option* opt, int value) {
  if (opt->count() > 0) return value;
  if (const char* env = std::getenv("RANKUNCERT_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      throw ConfigError("RANKUNCERT_THREADS: expected an integer, got '" + std::string(env) + "'");
    }
  }
  return 1;
}

/// Training flags that override config-file values when given.
struct TrainFlags {
  std::string config_path;
  std::string ablation, combiner, precision;
  double theta = 0, lr = 0, weight_decay = 0;
  int n_ua = 0, epochs = 0, batch_size = 0, tokens = 0, selection_k = 0, threads = 0;
  std::uint64_t seed = 0;
  std::vector<int> eval_ks;
  bool exclude_diagonal = false;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app) {
    opts["config"] = app->add_option("--config", config_path, "INI config file")
                         ->check(CLI::ExistingFile);
    opts["ablation"] = app->add_option("--ablation", ablation,
                                       "baseline, csu, isu, isu_csu or full");
    opts["combiner"] = app->add_option("--combiner", combiner, "add or concat_project");
    opts["precision"] = app->add_option("--precision", precision, "float32 or float64");
    opts["theta"] = app->add_option("--theta", theta, "mining angle in degrees");
    opts["lr"] = app->add_option("--lr", lr, "learning rate");
    opts["weight-decay"] = app->add_option("--weight-decay", weight_decay, "AdamW weight decay");
    opts["n-ua"] = app->add_option("--n-ua", n_ua, "UA blocks per side");
    opts["epochs"] = app->add_option("--epochs", epochs, "training epochs");
    opts["batch-size"] = app->add_option("--batch-size", batch_size, "mini-batch size");
    opts["tokens"] = app->add_option("--tokens", tokens, "attention tokens per feature");
    opts["selection-k"] =
        app->add_option("--selection-k", selection_k, "validation R@K used to keep the best epoch");
    opts["seed"] = app->add_option("--seed", seed, "random seed");
    opts["eval-ks"] = app->add_option("--eval-ks", eval_ks, "validation Ks")->delimiter(',');
    opts["exclude-diagonal"] =
        app->add_flag("--exclude-diagonal", exclude_diagonal, "drop j == i from mined positives");
    opts["threads"] = app->add_option("--threads", threads, "evaluation threads");
  }
  bool has(const std::string& name) const { return opts.at(name)->count() > 0; }

  TrainConfig resolve() const {
    TrainConfig c = has("config") ? load_config(config_path) : TrainConfig{};
    if (has("ablation")) c.ablation = Ablation::preset(ablation);
    if (has("combiner")) c.combiner = parse_combiner_mode(combiner);
    if (has("precision")) c.precision = parse_precision(precision);
    if (has("theta")) c.theta_degrees = theta;
    if (has("lr")) c.optimizer.learning_rate = lr;
    if (has("weight-decay")) c.optimizer.weight_decay = weight_decay;
    if (has("n-ua")) c.n_ua = n_ua;
    if (has("epochs")) c.epochs = epochs;
    if (has("batch-size")) c.batch_size = batch_size;
    if (has("tokens")) c.ua_tokens = tokens;
    if (has("selection-k")) c.selection_k = selection_k;
    if (has("seed")) c.seed = seed;
    if (has("eval-ks")) c.eval_ks = eval_ks;
    if (has("exclude-diagonal")) c.exclude_diagonal_from_g = exclude_diagonal;
    c.threads = env_threads(opts.at("threads"), threads);
    c.validate();
    return c;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path make_run_dir(const std::string& root, std::uint64_t digest) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << hex64(digest).substr(0, 8);
  fs::path dir = fs::path(root) / name.str();
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(root) / (name.str() + "." + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

std::optional<Dataset> validation_split(const LoadedData& data, const std::string& name,
                                        std::ostream& err) {
  if (name == "none") return std::nullopt;
  const Split s = parse_split(name);
  if (data.count(s) == 0) {
    err << "note: no '" << name << "' triplets; training without validation\n";
    return std::nullopt;
  }
  return data.split(s);
}

int cmd_train(const DataPaths& paths, const TrainFlags& flags, const std::string& split,
              const std::string& val_split, const std::string& runs_dir, const std::string& run_dir,
              std::ostream& out, std::ostream& err) {
  const TrainConfig config = flags.resolve();
  const LoadedData data = load_data(paths);
  const Dataset train = data.split(parse_split(split));
  const std::optional<Dataset> val = validation_split(data, val_split, err);

  const fs::path dir = run_dir.empty() ? make_run_dir(runs_dir, config.digest()) : fs::path(run_dir);
  fs::create_directories(dir);
  write_text(dir / "config.ini", config.to_ini());
  const fs::path metrics_path = dir / "metrics.jsonl";
  write_text(metrics_path, "");
  err << "run directory: " << dir.string() << "\n";

  auto observer = [&](const EpochMetrics& m, const TrainState&) {
    std::ofstream log(metrics_path, std::ios::app);
    if (!log) throw IoError("cannot append to '" + metrics_path.string() + "'");
    log << m.to_json().dump() << "\n";
    err << "epoch " << (m.epoch + 1) << "/" << config.epochs << "  gamma=" << m.gamma
        << "  L_CS=" << m.loss_cs << "  L_DR=" << m.loss_dr;
    for (std::size_t i = 0; i < m.recalls.size(); ++i) {
      err << "  R@" << m.ks[i] << "=" << m.recalls[i];
    }
    err << "\n";
  };
  const TrainResult result = run_training(config, train, val ? &*val : nullptr, observer);
  save_checkpoint(to_checkpoint(result.best, config), dir / "checkpoint.runc");
  save_checkpoint(to_checkpoint(result.last, config), dir / "last.runc");

  const Dataset& report_on = val ? *val : train;
  EvalOptions options;
  options.ks.clear();
  const std::size_t gallery = build_gallery(report_on).size();
  for (int k : config.eval_ks) {
    if (static_cast<std::size_t>(k) <= gallery) options.ks.push_back(k);
  }
  if (options.ks.empty()) options.ks.push_back(1);
  options.threads = config.threads;
  const RecallReport report = evaluate(result.best.model, report_on, options);
  nlohmann::json doc = report.to_json();
  doc["split"] = val ? val_split : split;
  doc["best_epoch"] = result.best_epoch;
  write_text(dir / "eval.json", doc.dump(2) + "\n");
  out << report.to_table();
  return 0;
}

int cmd_eval(const DataPaths& paths, const std::string& checkpoint_path, const std::string& split,
             const std::vector<int>& ks, bool subset, const std::vector<int>& subset_ks,
             bool per_category, bool json, const std::string& out_path, int threads,
             std::ostream& out) {
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  const LoadedData data = load_data(paths);
  if (static_cast<int>(checkpoint.dim) != data.images->dim()) {
    throw ShapeError("checkpoint dim " + std::to_string(checkpoint.dim) +
                     " does not match data dim " + std::to_string(data.images->dim()));
  }
  const TrainState state = from_checkpoint(checkpoint);
  const Dataset dataset =
      data.split(split == "all" ? std::nullopt : std::optional<Split>(parse_split(split)));
  EvalOptions options;
  options.ks = ks;
  if (!subset_ks.empty()) {
    options.subset_ks = subset_ks;
  } else if (subset) {
    options.subset_ks = {1, 2, 3};
  }
  options.per_category = per_category;
  options.threads = threads;
  const RecallReport report = evaluate(state.model, dataset, options);
  if (!out_path.empty()) write_text(out_path, report.to_json().dump(2) + "\n");
  if (json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << report.to_table();
  }
  return 0;
}

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out, std::ostream& err) {
  const auto results = run_gradcheck(options);
  bool ok = true;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-14s instances=%-4d max_rel_err=%.3e  %s\n",
                  r.component.c_str(), r.instances, r.max_relative_error,
                  r.passed ? "PASS" : "FAIL");
    out << line;
    if (!r.passed) {
      ok = false;
      err << "gradcheck: " << r.component << " exceeds tolerance " << options.tolerance
          << " with relative error " << r.max_relative_error << "\n";
    }
  }
  return ok ? 0 : kExitFailure;
}

int cmd_synth(const SynthSpec& spec, const std::string& dir, std::ostream& err) {
  spec.validate();
  const SyntheticWorld world = generate_synthetic(spec);
  fs::create_directories(dir);
  save_store(world.images, fs::path(dir) / "images.emb");
  save_store(world.texts, fs::path(dir) / "texts.emb");
  save_manifest(world.manifest, fs::path(dir) / "manifest.jsonl");
  write_text(fs::path(dir) / "ground_truth.json", world.ground_truth_json().dump(2) + "\n");
  err << "wrote " << world.images.count() << " images, " << world.texts.count() << " texts, "
      << world.manifest.size() << " triplets to " << dir << "\n";
  return 0;
}

int cmd_sweep(const DataPaths& paths, const TrainFlags& flags, std::vector<double> thetas,
              std::vector<int> n_values, const std::string& out_path, std::ostream& out,
              std::ostream& err) {
  TrainConfig base = flags.resolve();
  std::sort(thetas.begin(), thetas.end(), std::greater<>());
  std::sort(n_values.begin(), n_values.end());
  const LoadedData data = paths.given() ? load_data(paths) : from_world(generate_synthetic({}));
  const Dataset train = data.split(Split::kTrain);
  const std::optional<Dataset> val = validation_split(data, "val", err);

  std::ostringstream csv;
  csv << "theta_degrees,n_ua";
  for (int k : base.eval_ks) csv << ",R@" << k;
  csv << "\n";
  for (double theta : thetas) {
    for (int n : n_values) {
      TrainConfig config = base;
      config.theta_degrees = theta;
      config.n_ua = n;
      config.validate();
      const TrainResult result = run_training(config, train, val ? &*val : nullptr);
      EvalOptions options;
      options.ks = config.eval_ks;
      options.threads = config.threads;
      const RecallReport report = evaluate(result.best.model, val ? *val : train, options);
      char cell[32];
      std::snprintf(cell, sizeof cell, "%g,%d", theta, n);
      csv << cell;
      for (double r : report.recalls) {
        std::snprintf(cell, sizeof cell, ",%.6f", r);
        csv << cell;
      }
      csv << "\n";
      err << "sweep: theta=" << theta << " n=" << n << " done\n";
    }
  }
  if (out_path.empty()) {
    out << csv.str();
  } else {
    write_text(out_path, csv.str());
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ranking-aware uncertainty training and retrieval evaluation", "rankuncert"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train the combiner and UA chains");
  DataPaths train_paths;
  train_paths.add(train, true);
  TrainFlags train_flags;
  train_flags.add(train);
  std::string train_split = "train", val_split = "val", runs_dir = "runs", run_dir;
  train->add_option("--split", train_split, "manifest split to train on")->capture_default_str();
  train->add_option("--val-split", val_split, "validation split, or 'none'")->capture_default_str();
  train->add_option("--runs-dir", runs_dir, "parent of timestamped run directories")
      ->capture_default_str();
  train->add_option("--run-dir", run_dir, "exact run directory (overrides --runs-dir)");

  // eval
  auto* eval = app.add_subcommand("eval", "rank a split against its gallery");
  DataPaths eval_paths;
  eval_paths.add(eval, true);
  std::string checkpoint_path, eval_split = "test", eval_out;
  std::vector<int> ks = {1, 5, 10, 50}, subset_ks;
  bool subset = false, per_category = false, json = false;
  int eval_threads = 1;
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train, val, test or all")->capture_default_str();
  eval->add_option("--ks", ks, "recall cutoffs")->delimiter(',')->capture_default_str();
  eval->add_flag("--subset", subset, "add subset recall at 1, 2, 3 and the overall score");
  eval->add_option("--subset-ks", subset_ks, "subset recall cutoffs")->delimiter(',');
  eval->add_flag("--per-category", per_category, "rank each category against its own gallery");
  eval->add_flag("--json", json, "print the JSON report instead of the table");
  eval->add_option("--out", eval_out, "also write the JSON report here");
  auto* eval_threads_opt = eval->add_option("--threads", eval_threads, "ranking threads");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  GradcheckOptions gc_options;
  std::string fault;
  gc->add_option("--component", gc_options.components, "component to check (repeatable)");
  gc->add_option("--instances", gc_options.instances, "random instances per component")
      ->capture_default_str();
  gc->add_option("--seed", gc_options.seed, "random seed")->capture_default_str();
  auto* fault_opt = gc->add_option("--inject-fault", fault)->group("");

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic many-to-many dataset");
  SynthSpec spec;
  std::string synth_dir;
  synth->add_option("--out", synth_dir, "output directory")->required();
  synth->add_option("--dim", spec.dim)->capture_default_str();
  synth->add_option("--clusters", spec.num_clusters)->capture_default_str();
  synth->add_option("--sources-per-target", spec.sources_per_target)->capture_default_str();
  synth->add_option("--targets-per-source", spec.targets_per_source)->capture_default_str();
  synth->add_option("--sigma", spec.noise_sigma)->capture_default_str();
  synth->add_option("--spread", spec.cluster_spread)->capture_default_str();
  synth->add_option("--seed", spec.seed)->capture_default_str();
  synth->add_option("--train", spec.train_triplets, "training triplets")->capture_default_str();
  synth->add_option("--val", spec.val_triplets, "validation triplets")->capture_default_str();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid over theta and n, one CSV row per setting");
  DataPaths sweep_paths;
  sweep_paths.add(sweep, false);
  TrainFlags sweep_flags;
  sweep_flags.add(sweep);
  std::vector<double> thetas = {75, 60, 45, 30};
  std::vector<int> n_values = {1, 2, 3};
  std::string sweep_out;
  sweep->add_option("--thetas", thetas, "angles in degrees")->delimiter(',')->capture_default_str();
  sweep->add_option("--n-values", n_values, "UA chain lengths")->delimiter(',')->capture_default_str();
  sweep->add_option("--out", sweep_out, "CSV path (default: standard output)");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (train->parsed()) {
      return cmd_train(train_paths, train_flags, train_split, val_split, runs_dir, run_dir, out,
                       err);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_paths, checkpoint_path, eval_split, ks, subset, subset_ks,
                      per_category, json, eval_out, env_threads(eval_threads_opt, eval_threads),
                      out);
    }
    if (gc->parsed()) {
      if (fault_opt->count() > 0) gc_options.inject_fault = fault;
      return cmd_gradcheck(gc_options, out, err);
    }
    if (synth->parsed()) return cmd_synth(spec, synth_dir, err);
    if (sweep->parsed()) {
      return cmd_sweep(sweep_paths, sweep_flags, thetas, n_values, sweep_out, out, err);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const PoisonedComputation& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace rankuncert
