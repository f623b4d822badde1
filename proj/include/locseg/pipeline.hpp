#ifndef LOCSEG_PIPELINE_HPP
#define LOCSEG_PIPELINE_HPP

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include <json.hpp>

#include "locseg/engine/parallel.hpp"
#include "locseg/evaluation.hpp"
#include "locseg/inference.hpp"
#include "locseg/location_features.hpp"
#include "locseg/patches.hpp"
#include "locseg/trainer.hpp"
#include "locseg/volume.hpp"

// Glue between the modules: cohort loading, features, one train-segment-evaluate run, and
// the dataset-size ablation. The CLI and the acceptance harness both go through here.

namespace locseg {

/// Accepts either a cohort directory or its manifest file.
inline fs::path manifest_path(const fs::path& cohort) {
  return fs::is_directory(cohort) ? cohort / "manifest.json" : cohort;
}

struct CohortSplits {
  fs::path manifest_file;
  std::vector<CaseRecord> train, validation, test;
  std::vector<fs::path> train_dirs, validation_dirs, test_dirs;

  std::vector<CaseRecord>& split(Split s) { return s == Split::train ? train : s == Split::validation ? validation : test; }
  const std::vector<CaseRecord>& split(Split s) const {
    return s == Split::train ? train : s == Split::validation ? validation : test;
  }
  std::vector<fs::path>& dirs(Split s) {
    return s == Split::train ? train_dirs : s == Split::validation ? validation_dirs : test_dirs;
  }
};

inline CohortSplits load_cohort_splits(const fs::path& cohort) {
  CohortSplits out;
  out.manifest_file = manifest_path(cohort);
  const auto manifest = read_manifest(out.manifest_file);
  std::vector<fs::path> dirs;
  for (const auto& e : manifest) dirs.push_back(resolve_case_path(out.manifest_file, e));
  std::vector<CaseRecord> records(manifest.size());
  parallel_for(manifest.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) records[i] = load_case(dirs[i]);
  });
  std::set<std::string> ids;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (!ids.insert(records[i].case_id).second) throw std::runtime_error("manifest: duplicate case_id " + records[i].case_id);
    out.split(manifest[i].split).push_back(std::move(records[i]));
    out.dirs(manifest[i].split).push_back(dirs[i]);
  }
  if (out.train.empty()) throw std::runtime_error(out.manifest_file.string() + ": no training cases");
  return out;
}

/// Replaces the location features of every case with ones built from `prior`.
inline void assign_location_features(std::vector<CaseRecord>& cases, const ImageVolume& prior) {
  parallel_for(cases.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) cases[i].location_features = assemble_location_features(cases[i], prior);
  });
}

/// Uses the stored features when every case has them; otherwise recomputes all of them from
/// the training-split prior so that no case mixes two priors. Returns true if recomputed.
inline bool ensure_cohort_features(CohortSplits& cohort) {
  bool complete = true;
  for (auto s : {Split::train, Split::validation, Split::test})
    for (const auto& c : cohort.split(s)) complete = complete && c.location_features.has_value();
  if (complete) return false;
  const ImageVolume prior = prior_probability_map(cohort.train);
  for (auto s : {Split::train, Split::validation, Split::test}) assign_location_features(cohort.split(s), prior);
  return true;
}

/// Computes the training prior and writes location/ into every case directory plus
/// prior.f32 beside the manifest.
inline void write_cohort_features(CohortSplits& cohort) {
  const ImageVolume prior = prior_probability_map(cohort.train);
  const fs::path root = cohort.manifest_file.parent_path();
  write_raw(root / "prior.f32", prior.values);
  std::ofstream(root / "prior.json") << nlohmann::json{{"dims", prior.dims},
                                                       {"voxel_size_mm", prior.voxel_size},
                                                       {"training_cases", cohort.train.size()}}
                                            .dump(2)
                                     << '\n';
  for (auto s : {Split::train, Split::validation, Split::test}) {
    auto& cases = cohort.split(s);
    assign_location_features(cases, prior);
    for (std::size_t i = 0; i < cases.size(); ++i) save_location_features(cohort.dirs(s)[i], *cases[i].location_features);
  }
}

inline std::vector<PreparedCase> prepare_cases(const std::vector<CaseRecord>& cases) {
  std::vector<PreparedCase> out(cases.size());
  parallel_for(cases.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = prepare_case(cases[i]);
  });
  return out;
}

// ---------------------------------------------------------------- one method

struct SplitSamples {
  SampleSet train, validation;
};

/// Validation samples use a derived seed so they never share draws with the training set.
inline std::uint64_t validation_sample_seed(std::uint64_t seed) { return mix64(seed ^ 0x76616c6964ULL); }

inline SplitSamples build_split_samples(const std::vector<PreparedCase>& train, const std::vector<PreparedCase>& validation,
                                        std::uint64_t seed) {
  return {build_balanced_dataset(train, seed), build_balanced_dataset(validation, validation_sample_seed(seed))};
}

struct MethodConfig {
  std::string name;
  NetworkSpec net;
  TrainConfig train;
  std::vector<double> alpha_sweep;  // empty: train once with net.alpha
};

inline nlohmann::json to_json(const MethodConfig& m) {
  return {{"name", m.name}, {"network", to_json(m.net)}, {"train", to_json(m.train)}, {"alpha_sweep", m.alpha_sweep}};
}

struct TrainedMethod {
  Network<float> net;
  TrainResult result;  // of the selected alpha
  std::vector<AlphaTrial> alpha_trials;
};

using ProgressFn = std::function<void(const std::string&)>;

inline TrainedMethod train_method(const MethodConfig& m, const SplitSamples& samples, const ProgressFn& progress = {}) {
  auto report = [&](double alpha, const EpochStats& e) {
    if (!progress) return;
    std::ostringstream s;
    s << m.name;
    if (!m.alpha_sweep.empty()) s << " alpha=" << alpha;
    s << " epoch " << e.epoch << " loss " << std::setprecision(5) << e.train_loss << " val Az " << e.val_az << " ("
      << std::setprecision(3) << e.seconds << " s)";
    progress(s.str());
  };
  if (!m.alpha_sweep.empty()) {
    auto sweep = sweep_alpha(m.net, samples.train, samples.validation, m.train, m.alpha_sweep, report);
    Network<float> best = sweep.best.best;
    return {std::move(best), std::move(sweep.best), std::move(sweep.trials)};
  }
  auto r = train(m.net, samples.train, samples.validation, m.train,
                 [&](const EpochStats& e) { report(m.net.alpha, e); });
  Network<float> best = r.best;
  return {std::move(best), std::move(r), {}};
}

/// Probability maps for the cases. The single-scale family runs densely (bitwise equal to
/// the sliding window); multi-scale networks use the sliding window.
inline std::vector<ImageVolume> segment_cases(const Network<float>& net, const std::vector<PreparedCase>& cases) {
  std::vector<ImageVolume> out;
  if (net.spec().fusion == FusionMode::ss) {
    const auto dense = convert_to_fully_convolutional(net);
    for (const auto& c : cases) out.push_back(segment_dense(dense, c));
  } else {
    for (const auto& c : cases) out.push_back(segment_sliding_window(net, c));
  }
  return out;
}

struct CaseMetrics {
  std::string case_id;
  ConfusionCounts counts;
};

struct EvaluationReport {
  double threshold = 0.0;
  double validation_dice = 0.0;  // pooled, at the threshold
  std::vector<double> validation_dice_curve;
  std::vector<CaseMetrics> test_cases;
  ConfusionCounts pooled;
  double test_dice = 0.0;       // pooled over test cases
  double mean_case_dice = 0.0;  // secondary statistic
  RocCurve test_roc;            // voxelwise, brain mask only

  double az() const { return test_roc.az; }
};

inline std::vector<ScoredCase> scored_cases(const std::vector<PreparedCase>& cases, const std::vector<ImageVolume>& probs) {
  if (cases.size() != probs.size()) throw std::invalid_argument("evaluation: case and map counts differ");
  std::vector<ScoredCase> out;
  for (std::size_t i = 0; i < cases.size(); ++i) out.push_back({&probs[i], &cases[i].annotation, &cases[i].brain_mask});
  return out;
}

/// t* from the validation maps, then test Dice per case and pooled at t*, and test Az.
inline EvaluationReport evaluate_segmentations(const std::vector<PreparedCase>& validation,
                                               const std::vector<ImageVolume>& validation_probs,
                                               const std::vector<PreparedCase>& test, const std::vector<ImageVolume>& test_probs) {
  if (test.empty()) throw std::invalid_argument("evaluation: no test cases");
  const auto choice = optimal_threshold(scored_cases(validation, validation_probs));
  EvaluationReport r;
  r.threshold = choice.threshold;
  r.validation_dice = choice.dice;
  r.validation_dice_curve = choice.dice_curve;
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  double dice_sum = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    check_same_grid(test_probs[i], test[i].dims(), test[i].case_id + " probability map");
    const auto counts = confusion_counts(apply_threshold(test_probs[i], r.threshold), test[i].annotation, test[i].brain_mask);
    r.test_cases.push_back({test[i].case_id, counts});
    r.pooled += counts;
    dice_sum += dice(counts);
    for (std::size_t v = 0; v < test[i].brain_mask.size(); ++v) {
      if (!test[i].brain_mask[v]) continue;
      scores.push_back(test_probs[i][v]);
      labels.push_back(test[i].annotation[v]);
    }
  }
  r.test_dice = dice(r.pooled);
  r.mean_case_dice = dice_sum / static_cast<double>(test.size());
  r.test_roc = roc_curve(scores, labels);
  return r;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.test_cases)
    cases.push_back({{"case_id", c.case_id}, {"counts", to_json(c.counts)}, {"dice", dice(c.counts)}, {"both_empty", both_empty(c.counts)}});
  return {{"threshold", r.threshold},
          {"threshold_rule", "argmax pooled validation Dice over t = 0.00..1.00 step 0.01, smallest t on ties, p > t"},
          {"validation_dice", r.validation_dice},
          {"test",
           {{"pooled_counts", to_json(r.pooled)},
            {"pooled_dice", r.test_dice},
            {"mean_case_dice", r.mean_case_dice},
            {"az", r.az()},
            {"cases", cases}}}};
}

/// Per-case test counts in file order, read back from metrics.json.
inline std::vector<CaseMetrics> test_cases_from_metrics(const nlohmann::json& metrics) {
  std::vector<CaseMetrics> out;
  for (const auto& c : metrics.at("evaluation").at("test").at("cases"))
    out.push_back({c.at("case_id").get<std::string>(), counts_from_json(c.at("counts"))});
  return out;
}

struct MethodRun {
  MethodConfig config;
  TrainedMethod trained;
  EvaluationReport report;
};

/// What train.json records; metrics.json is this plus the evaluation block.
inline nlohmann::json training_summary(const MethodConfig& config, const TrainedMethod& trained) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : trained.alpha_trials)
    trials.push_back({{"alpha", t.alpha}, {"validation_az", t.val_az}, {"best_epoch", t.best_epoch}});
  return {{"method", config.name},
          {"network", to_json(trained.net.spec())},
          {"train", to_json(config.train)},
          {"alpha_sweep", config.alpha_sweep},
          {"best_epoch", trained.result.best_epoch},
          {"validation_az", trained.result.best_val_az},
          {"alpha_trials", trials}};
}

inline nlohmann::json metrics_json(const MethodRun& run) {
  auto j = training_summary(run.config, run.trained);
  j["evaluation"] = to_json(run.report);
  return j;
}

/// stats.csv, timing.csv, model.lsnn, metrics.json and roc.csv for a finished run.
inline void write_method_run(const fs::path& dir, const MethodRun& run) {
  fs::create_directories(dir);
  write_training_stats(dir, run.trained.result.history);
  save_checkpoint((dir / "model.lsnn").string(), run.trained.net);
  std::ofstream(dir / "metrics.json") << metrics_json(run).dump(2) << '\n';
  write_roc_csv(dir / "roc.csv", run.report.test_roc);
}

/// Train on the training samples, segment validation and test cases, evaluate.
inline MethodRun run_method(const MethodConfig& m, const SplitSamples& samples, const std::vector<PreparedCase>& validation,
                            const std::vector<PreparedCase>& test, const ProgressFn& progress = {}) {
  MethodRun run{m, train_method(m, samples, progress), {}};
  const auto val_probs = segment_cases(run.trained.net, validation);
  const auto test_probs = segment_cases(run.trained.net, test);
  run.report = evaluate_segmentations(validation, val_probs, test, test_probs);
  if (progress) {
    std::ostringstream s;
    s << m.name << ": t* " << run.report.threshold << ", test Dice " << std::setprecision(4) << run.report.test_dice
      << ", test Az " << run.report.az();
    progress(s.str());
  }
  return run;
}

// ---------------------------------------------------------------- ablation

struct AblationRow {
  double fraction = 0.0;
  std::size_t train_cases = 0;
  double validation_az = 0.0;
  double threshold = 0.0;
  double test_dice = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // in the order of the requested fractions
  bool monotone = false;          // Dice never drops as the training set grows
  bool non_degrading = false;     // Dice(largest) >= Dice(smallest) - tolerance
  double tolerance = 0.02;
};

/// One full train + evaluate per fraction on nested subsets of the training cases. The
/// prior feature is rebuilt from each subset, since it is a statistic of the training data.
inline AblationResult dataset_size_ablation(const CohortSplits& cohort, const std::vector<double>& fractions,
                                            const MethodConfig& base, std::uint64_t seed, const fs::path& out_dir = {},
                                            const ProgressFn& progress = {}) {
  if (fractions.empty()) throw std::invalid_argument("ablation: no fractions");
  const auto subsets = nested_subsets(cohort.train.size(), fractions, seed);
  AblationResult result;
  for (std::size_t f = 0; f < fractions.size(); ++f) {
    std::vector<CaseRecord> train;
    for (auto i : subsets[f]) train.push_back(cohort.train[i]);
    auto validation = cohort.validation;
    auto test = cohort.test;
    const ImageVolume prior = prior_probability_map(train);
    assign_location_features(train, prior);
    assign_location_features(validation, prior);
    assign_location_features(test, prior);
    const auto ptrain = prepare_cases(train), pval = prepare_cases(validation), ptest = prepare_cases(test);
    MethodConfig m = base;
    std::ostringstream name;
    name << base.name << "@" << fractions[f];
    m.name = name.str();
    const auto run = run_method(m, build_split_samples(ptrain, pval, base.train.seed), pval, ptest, progress);
    if (!out_dir.empty()) write_method_run(out_dir / ("fraction_" + std::to_string(f)), run);
    result.rows.push_back({fractions[f], train.size(), run.trained.result.best_val_az, run.report.threshold, run.report.test_dice});
  }
  auto by_size = result.rows;
  std::stable_sort(by_size.begin(), by_size.end(), [](const auto& a, const auto& b) { return a.train_cases < b.train_cases; });
  result.monotone = true;
  for (std::size_t i = 1; i < by_size.size(); ++i) result.monotone = result.monotone && by_size[i].test_dice >= by_size[i - 1].test_dice;
  result.non_degrading = by_size.back().test_dice >= by_size.front().test_dice - result.tolerance;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream csv(out_dir / "ablation.csv");
    csv << "fraction,train_cases,validation_az,threshold,test_dice\n" << std::setprecision(17);
    for (const auto& r : result.rows)
      csv << r.fraction << ',' << r.train_cases << ',' << r.validation_az << ',' << r.threshold << ',' << r.test_dice << '\n';
    std::ofstream(out_dir / "ablation.json")
        << nlohmann::json{{"monotone", result.monotone},
                          {"non_degrading", result.non_degrading},
                          {"tolerance", result.tolerance},
                          {"rule", "Dice(largest subset) >= Dice(smallest subset) - tolerance"}}
               .dump(2)
        << '\n';
  }
  return result;
}

}  // namespace locseg

#endif  // LOCSEG_PIPELINE_HPP
