// Command-line front end. Kept in a header so tests and the acceptance harness can run
// subcommands in-process.
#ifndef LOCSEG_TOOLS_CLI_HPP
#define LOCSEG_TOOLS_CLI_HPP

#include <chrono>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "locseg/engine/parallel.hpp"
#include "locseg/pipeline.hpp"
#include "locseg/synth.hpp"

namespace locseg::cli {

inline constexpr const char* kToolVersion = "0.1.0";

struct MethodOptions {
  std::string fusion = "ss";
  std::string inject = "none";
  double alpha = 1.0;
  std::vector<double> alpha_sweep;
  std::size_t epochs = TrainConfig{}.epochs;
  std::size_t batch_size = TrainConfig{}.batch_size;
  double learning_rate = TrainConfig{}.learning_rate;
  double rho = TrainConfig{}.rho;
  double epsilon = TrainConfig{}.epsilon;
  double dropout = TrainConfig{}.dropout;

  MethodConfig resolve(std::uint64_t seed) const {
    MethodConfig m;
    m.net.fusion = parse_fusion(fusion);
    m.net.injection = parse_injection(inject);
    m.net.alpha = m.net.injection == InjectionPoint::none ? 0.0 : alpha;
    m.name = fusion + (m.net.injection == InjectionPoint::none ? "" : "+" + inject);
    m.train.epochs = epochs;
    m.train.batch_size = batch_size;
    m.train.learning_rate = learning_rate;
    m.train.rho = rho;
    m.train.epsilon = epsilon;
    m.train.dropout = dropout;
    m.train.seed = seed;
    if (m.net.injection != InjectionPoint::none) m.alpha_sweep = alpha_sweep;
    validate(m.net);
    validate(m.train);
    return m;
  }
};

struct Options {
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  bool no_cache = false;

  SynthConfig synth;
  fs::path out;
  fs::path cohort;
  fs::path model;
  fs::path segmentations;
  fs::path run;
  fs::path method_a, method_b;
  std::vector<std::string> splits{"validation", "test"};
  double threshold = 0.5;
  std::size_t bootstraps = 100;
  std::vector<double> fractions{1.0, 0.5, 0.25, 0.125, 0.0625};
  MethodOptions method;
};

namespace detail {

inline void add_common(CLI::App* sub, Options& o, bool with_seed) {
  sub->add_option("--threads", o.threads, "Worker threads; results do not depend on this")->check(CLI::PositiveNumber);
  if (with_seed) sub->add_option("--seed", o.seed, "Seed for every random draw of this subcommand");
}

inline void add_method(CLI::App* sub, MethodOptions& m) {
  sub->add_option("--fusion", m.fusion, "Architecture: ss, msef, msiw or msws")->check(CLI::IsMember({"ss", "msef", "msiw", "msws"}));
  sub->add_option("--inject", m.inject, "Location injection point: none, lcl, ffcl or sfcl")
      ->check(CLI::IsMember({"none", "lcl", "ffcl", "sfcl"}));
  sub->add_option("--alpha", m.alpha, "Scale applied to the 8 location features")->check(CLI::PositiveNumber);
  sub->add_option("--alpha-sweep", m.alpha_sweep,
                  "Alphas to try; the one with the best validation Az is kept (overrides --alpha)")
      ->delimiter(',');
  sub->add_option("--epochs", m.epochs, "Training epochs")->check(CLI::PositiveNumber);
  sub->add_option("--batch-size", m.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  sub->add_option("--learning-rate", m.learning_rate, "RMSprop learning rate")->check(CLI::PositiveNumber);
  sub->add_option("--rho", m.rho, "RMSprop decay")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--epsilon", m.epsilon, "RMSprop epsilon")->check(CLI::PositiveNumber);
  sub->add_option("--dropout", m.dropout, "Dropout probability on fully connected inputs")->check(CLI::Range(0.0, 1.0));
}

}  // namespace detail

/// Builds the application; option values land in `o`.
inline std::unique_ptr<CLI::App> make_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Patch-based brain lesion segmentation with location-aware CNNs", "locseg");
  app->option_defaults()->always_capture_default();
  app->set_version_flag("--version", kToolVersion, "Print the tool version");
  app->set_config("--config", "", "TOML/INI file setting any flag ([subcommand] sections); command-line values win");
  app->require_subcommand(1);

  auto* synth = app->add_subcommand("synth", "Generate a synthetic pre-registered cohort");
  synth->add_option("--cases", o.synth.cases, "Number of cases")->check(CLI::PositiveNumber);
  synth->add_option("--out", o.out, "Output cohort directory")->required();
  synth->add_option("--dims", o.synth.dims, "Grid size x y z");
  synth->add_option("--voxel-size", o.synth.voxel_size, "Voxel size in mm (x y z)");
  synth->add_option("--decoy-rate", o.synth.decoy_rate, "Decoy blobs per lesion blob");
  synth->add_option("--noise-sigma", o.synth.noise_sigma, "Gaussian noise sigma on both channels");
  synth->add_option("--contrast-min", o.synth.contrast_min, "Lowest FLAIR blob contrast");
  synth->add_option("--contrast-max", o.synth.contrast_max, "Highest FLAIR blob contrast");
  synth->add_option("--lesions-min", o.synth.lesions_min, "Fewest lesion blobs per case");
  synth->add_option("--lesions-max", o.synth.lesions_max, "Most lesion blobs per case");
  detail::add_common(synth, o, true);

  auto* features = app->add_subcommand("features", "Compute the 8 location features for every case of a cohort");
  features->add_option("--cohort", o.cohort, "Cohort directory or manifest.json")->required()->check(CLI::ExistingPath);
  detail::add_common(features, o, false);

  auto* train = app->add_subcommand("train", "Train one network and keep the epoch with the best validation Az");
  train->add_option("--cohort", o.cohort, "Cohort directory or manifest.json")->required()->check(CLI::ExistingPath);
  train->add_option("--out", o.out, "Run directory")->required();
  detail::add_method(train, o.method);
  train->add_flag("--no-cache", o.no_cache, "Do not read or write the cohort's sample cache");
  detail::add_common(train, o, true);

  auto* segment = app->add_subcommand("segment", "Write probability maps and segmentations for cohort cases");
  segment->add_option("--model", o.model, "Run directory or model.lsnn")->required()->check(CLI::ExistingPath);
  segment->add_option("--cohort", o.cohort, "Cohort directory or manifest.json")->required()->check(CLI::ExistingPath);
  segment->add_option("--splits", o.splits, "Splits to segment")->delimiter(',')->check(CLI::IsMember({"train", "validation", "test"}));
  segment->add_option("--out", o.out, "Output directory (default: <run>/segmentations)");
  segment->add_option("--threshold", o.threshold, "Threshold for segmentation.u8 (p > t)")->check(CLI::Range(0.0, 1.0));
  detail::add_common(segment, o, false);

  auto* eval = app->add_subcommand("eval", "Pick t* on validation maps and score the test maps");
  eval->add_option("--run", o.run, "Run directory (reads train.json, writes metrics.json and roc.csv)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--cohort", o.cohort, "Cohort directory or manifest.json")->required()->check(CLI::ExistingPath);
  eval->add_option("--segmentations", o.segmentations, "Probability maps (default: <run>/segmentations)");
  detail::add_common(eval, o, false);

  auto* compare = app->add_subcommand("compare", "Patient-level bootstrap comparison of two evaluated runs");
  compare->add_option("--method-a", o.method_a, "Run directory of method A")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--method-b", o.method_b, "Run directory of method B")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--bootstraps", o.bootstraps, "Bootstrap replicates")->check(CLI::PositiveNumber);
  compare->add_option("--out", o.out, "Output directory (default: comparison)");
  detail::add_common(compare, o, true);

  auto* ablate = app->add_subcommand("ablate", "Train and evaluate on nested fractions of the training cases");
  ablate->add_option("--cohort", o.cohort, "Cohort directory or manifest.json")->required()->check(CLI::ExistingPath);
  ablate->add_option("--out", o.out, "Output directory")->required();
  ablate->add_option("--fractions", o.fractions, "Training-set fractions")->delimiter(',')->check(CLI::Range(0.0, 1.0));
  detail::add_method(ablate, o.method);
  detail::add_common(ablate, o, true);
  return app;
}

// ---------------------------------------------------------------- subcommands

namespace detail {

struct Context {
  const Options& o;
  std::ostream& out;
  nlohmann::json inputs = nlohmann::json::array();
  nlohmann::json outputs = nlohmann::json::array();
  fs::path manifest_dir;
};

inline std::vector<PreparedCase> prepared_split(const CohortSplits& cohort, Split s) { return prepare_cases(cohort.split(s)); }

inline fs::path sample_cache_path(const fs::path& manifest_file, Split s, std::uint64_t seed) {
  return manifest_file.parent_path() / "cache" / (to_string(s) + "_seed" + std::to_string(seed) + ".lssc");
}

inline void run_synth(Context& ctx) {
  auto cfg = ctx.o.synth;
  cfg.seed = ctx.o.seed;
  const auto result = generate_cohort(cfg, ctx.o.out);
  ctx.out << "wrote " << result.manifest.size() << " cases to " << ctx.o.out.string() << " (location Az "
          << result.gates.location_az << ", FLAIR Az " << result.gates.flair_az << ")\n";
  ctx.outputs.push_back((ctx.o.out / "manifest.json").string());
  ctx.manifest_dir = ctx.o.out;
}

inline void run_features(Context& ctx) {
  auto cohort = load_cohort_splits(ctx.o.cohort);
  write_cohort_features(cohort);
  ctx.inputs.push_back(cohort.manifest_file.string());
  ctx.outputs.push_back((cohort.manifest_file.parent_path() / "prior.f32").string());
  ctx.manifest_dir = cohort.manifest_file.parent_path() / "features";
  ctx.out << "wrote location features for " << cohort.train.size() + cohort.validation.size() + cohort.test.size()
          << " cases (prior from " << cohort.train.size() << " training cases)\n";
}

inline SampleSet cached_samples(const Context& ctx, const CohortSplits& cohort, Split s, const std::vector<PreparedCase>& cases,
                                std::uint64_t seed) {
  const auto path = sample_cache_path(cohort.manifest_file, s, seed);
  if (!ctx.o.no_cache && fs::exists(path)) return load_sample_cache(path);
  auto set = build_balanced_dataset(cases, seed);
  if (!ctx.o.no_cache) {
    fs::create_directories(path.parent_path());
    save_sample_cache(path, set);
  }
  return set;
}

inline void run_train(Context& ctx) {
  const auto method = ctx.o.method.resolve(ctx.o.seed);
  auto cohort = load_cohort_splits(ctx.o.cohort);
  if (ensure_cohort_features(cohort)) ctx.out << "location features missing on disk; computed from the training prior\n";
  if (cohort.validation.empty()) throw std::runtime_error("train: the cohort has no validation cases");
  const auto train_cases = prepared_split(cohort, Split::train), val_cases = prepared_split(cohort, Split::validation);
  SplitSamples samples{cached_samples(ctx, cohort, Split::train, train_cases, ctx.o.seed),
                       cached_samples(ctx, cohort, Split::validation, val_cases, validation_sample_seed(ctx.o.seed))};
  ctx.out << samples.train.size() << " training samples, " << samples.validation.size() << " validation samples\n";
  const auto trained = train_method(method, samples, [&](const std::string& line) { ctx.out << line << '\n' << std::flush; });
  fs::create_directories(ctx.o.out);
  write_training_stats(ctx.o.out, trained.result.history);
  save_checkpoint((ctx.o.out / "model.lsnn").string(), trained.net);
  std::ofstream(ctx.o.out / "train.json") << training_summary(method, trained).dump(2) << '\n';
  ctx.inputs.push_back(cohort.manifest_file.string());
  for (const char* f : {"model.lsnn", "stats.csv", "timing.csv", "train.json"}) ctx.outputs.push_back((ctx.o.out / f).string());
  ctx.manifest_dir = ctx.o.out;
  ctx.out << "best epoch " << trained.result.best_epoch << ", validation Az " << trained.result.best_val_az << '\n';
}

inline fs::path model_file(const fs::path& p) { return fs::is_directory(p) ? p / "model.lsnn" : p; }

inline void run_segment(Context& ctx) {
  const auto model = model_file(ctx.o.model);
  const auto net = load_checkpoint(model.string());
  auto cohort = load_cohort_splits(ctx.o.cohort);
  if (net.spec().injection != InjectionPoint::none && ensure_cohort_features(cohort))
    ctx.out << "location features missing on disk; computed from the training prior\n";
  const fs::path out = ctx.o.out.empty() ? model.parent_path() / "segmentations" : ctx.o.out;
  std::optional<DenseNetwork> dense;
  if (net.spec().fusion == FusionMode::ss) dense.emplace(net);
  for (const auto& name : ctx.o.splits) {
    const Split s = parse_split(name);
    for (const auto& c : prepared_split(cohort, s)) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto prob = dense ? segment_dense(*dense, c) : segment_sliding_window(net, c);
      write_segmentation(out / c.case_id, prob, ctx.o.threshold);
      ctx.out << c.case_id << ": " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    }
  }
  ctx.inputs.push_back(model.string());
  ctx.inputs.push_back(cohort.manifest_file.string());
  ctx.outputs.push_back(out.string());
  ctx.manifest_dir = out;
}

inline void run_eval(Context& ctx) {
  const fs::path seg = ctx.o.segmentations.empty() ? ctx.o.run / "segmentations" : ctx.o.segmentations;
  const auto cohort = load_cohort_splits(ctx.o.cohort);
  const auto val = prepared_split(cohort, Split::validation), test = prepared_split(cohort, Split::test);
  if (val.empty()) throw std::runtime_error("eval: the cohort has no validation cases");
  auto read_maps = [&](const std::vector<PreparedCase>& cases) {
    std::vector<ImageVolume> maps;
    for (const auto& c : cases) maps.push_back(read_probability(seg / c.case_id, c.dims(), c.brain_mask.voxel_size));
    return maps;
  };
  const auto val_maps = read_maps(val), test_maps = read_maps(test);
  const auto report = evaluate_segmentations(val, val_maps, test, test_maps);
  nlohmann::json metrics = nlohmann::json::object();
  if (fs::exists(ctx.o.run / "train.json")) std::ifstream(ctx.o.run / "train.json") >> metrics;
  metrics["evaluation"] = to_json(report);
  std::ofstream(ctx.o.run / "metrics.json") << metrics.dump(2) << '\n';
  write_roc_csv(ctx.o.run / "roc.csv", report.test_roc);
  // Segmentations are rewritten at the validation-optimal threshold.
  for (std::size_t i = 0; i < val.size(); ++i) write_segmentation(seg / val[i].case_id, val_maps[i], report.threshold);
  for (std::size_t i = 0; i < test.size(); ++i) write_segmentation(seg / test[i].case_id, test_maps[i], report.threshold);
  ctx.inputs.push_back(cohort.manifest_file.string());
  ctx.inputs.push_back(seg.string());
  ctx.outputs.push_back((ctx.o.run / "metrics.json").string());
  ctx.outputs.push_back((ctx.o.run / "roc.csv").string());
  ctx.manifest_dir = ctx.o.run / "eval";
  ctx.out << "t* " << report.threshold << ", test Dice " << report.test_dice << ", test Az " << report.az() << '\n';
}

inline nlohmann::json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing file: " + p.string());
  nlohmann::json j;
  std::ifstream(p) >> j;
  return j;
}

inline void run_compare(Context& ctx) {
  const auto ja = read_json(ctx.o.method_a / "metrics.json"), jb = read_json(ctx.o.method_b / "metrics.json");
  const auto a = test_cases_from_metrics(ja), b = test_cases_from_metrics(jb);
  if (a.size() != b.size()) throw std::runtime_error("compare: runs cover different numbers of test cases");
  std::vector<ConfusionCounts> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].case_id != b[i].case_id)
      throw std::runtime_error("compare: case lists differ (" + a[i].case_id + " vs " + b[i].case_id + ")");
    ca.push_back(a[i].counts);
    cb.push_back(b[i].counts);
  }
  const auto r = bootstrap_compare(ca, cb, ctx.o.bootstraps, ctx.o.seed);
  ConfusionCounts pa, pb;
  for (std::size_t i = 0; i < ca.size(); ++i) pa += ca[i], pb += cb[i];
  const fs::path out = ctx.o.out.empty() ? fs::path("comparison") : ctx.o.out;
  fs::create_directories(out);
  const nlohmann::json j = {{"method_a", ja.value("method", ctx.o.method_a.string())},
                            {"method_b", jb.value("method", ctx.o.method_b.string())},
                            {"cases", a.size()},
                            {"bootstraps", r.replicates},
                            {"seed", ctx.o.seed},
                            {"test_dice_a", dice(pa)},
                            {"test_dice_b", dice(pb)},
                            {"b_better", r.b_better},
                            {"ties", r.ties},
                            {"p_value", r.p_value},
                            {"p", r.p_string()},
                            {"below_resolution", r.below_resolution},
                            {"p_rule", "share of replicates with Dice(B) > Dice(A), ties counted half"},
                            {"replicate_dice_a", r.dice_a},
                            {"replicate_dice_b", r.dice_b}};
  std::ofstream(out / "metrics.json") << j.dump(2) << '\n';
  ctx.inputs.push_back(ctx.o.method_a.string());
  ctx.inputs.push_back(ctx.o.method_b.string());
  ctx.outputs.push_back((out / "metrics.json").string());
  ctx.manifest_dir = out;
  ctx.out << "Dice A " << dice(pa) << ", Dice B " << dice(pb) << ", p = " << r.p_string() << " (" << r.ties << " ties)\n";
}

inline void run_ablate(Context& ctx) {
  const auto method = ctx.o.method.resolve(ctx.o.seed);
  const auto cohort = load_cohort_splits(ctx.o.cohort);
  const auto result = dataset_size_ablation(cohort, ctx.o.fractions, method, ctx.o.seed, ctx.o.out,
                                            [&](const std::string& line) { ctx.out << line << '\n' << std::flush; });
  for (const auto& r : result.rows)
    ctx.out << "fraction " << r.fraction << " (" << r.train_cases << " cases): test Dice " << r.test_dice << '\n';
  ctx.out << (result.non_degrading ? "non-degrading" : "DEGRADING") << (result.monotone ? ", monotone\n" : ", not monotone\n");
  ctx.inputs.push_back(cohort.manifest_file.string());
  ctx.outputs.push_back((ctx.o.out / "ablation.csv").string());
  ctx.manifest_dir = ctx.o.out;
}

inline nlohmann::json typed(const std::string& text) {
  if (text == "{}") return nlohmann::json::array();
  const auto j = nlohmann::json::parse(text, nullptr, false);
  return j.is_number() ? j : nlohmann::json(text);
}

/// Every option of the subcommand with its resolved value (defaults included).
inline nlohmann::json resolved_config(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    const std::string key = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_expected_max() == 0) {
        j[key] = true;
      } else if (res.size() == 1 && opt->get_expected_max() == 1) {
        j[key] = typed(res.front());
      } else {
        j[key] = nlohmann::json::array();
        for (const auto& r : res) j[key].push_back(typed(r));
      }
    } else if (opt->get_expected_max() == 0) {
      j[key] = false;
    } else {
      j[key] = typed(opt->get_default_str());
    }
  }
  return j;
}

inline std::string config_file_text(const CLI::App& sub) {
  return "[" + sub.get_name() + "]\n" + sub.config_to_str(false, false);
}

}  // namespace detail

/// Runs one command line (without the program name). Returns the process exit status:
/// 0 success, 1 validation or runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  auto app = make_app(o);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app->parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app->exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  CLI::App* sub = app->get_subcommands().front();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    set_num_threads(o.threads);
    detail::Context ctx{o, out};
    const std::string name = sub->get_name();
    if (name == "synth") detail::run_synth(ctx);
    else if (name == "features") detail::run_features(ctx);
    else if (name == "train") detail::run_train(ctx);
    else if (name == "segment") detail::run_segment(ctx);
    else if (name == "eval") detail::run_eval(ctx);
    else if (name == "compare") detail::run_compare(ctx);
    else if (name == "ablate") detail::run_ablate(ctx);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!ctx.manifest_dir.empty()) {
      fs::create_directories(ctx.manifest_dir);
      const nlohmann::json manifest = {{"subcommand", name},
                                       {"config", detail::resolved_config(*sub)},
                                       {"seed", o.seed},
                                       {"threads", o.threads},
                                       {"inputs", ctx.inputs},
                                       {"outputs", ctx.outputs},
                                       {"tool_version", kToolVersion},
                                       {"wall_seconds", wall}};
      std::ofstream(ctx.manifest_dir / "run_manifest.json") << manifest.dump(2) << '\n';
      std::ofstream(ctx.manifest_dir / "run_config.toml") << detail::config_file_text(*sub);
    }
    set_num_threads(1);
    return 0;
  } catch (const std::exception& e) {
    set_num_threads(1);
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace locseg::cli

#endif  // LOCSEG_TOOLS_CLI_HPP
