#ifndef LOCSEG_TRAINER_HPP
#define LOCSEG_TRAINER_HPP

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "locseg/engine/parameter_store.hpp"
#include "locseg/evaluation.hpp"
#include "locseg/network.hpp"
#include "locseg/patches.hpp"

namespace locseg {

struct TrainConfig {
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double rho = 0.9;
  double epsilon = 1e-8;
  std::size_t epochs = 30;
  double dropout = 0.3;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 256;
  double stop_below_loss = 0.0;  // end training after the first epoch whose mean loss is below this; 0 disables
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (c.epochs == 0) throw std::invalid_argument("train: epochs must be positive");
  if (c.eval_batch == 0) throw std::invalid_argument("train: evaluation batch must be positive");
  validate(RmspropConfig{c.learning_rate, c.rho, c.epsilon});
  check_drop_probability(c.dropout);
  if (!(c.stop_below_loss >= 0.0)) throw std::invalid_argument("train: stop_below_loss must be non-negative");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"rho", c.rho},
          {"epsilon", c.epsilon},       {"epochs", c.epochs},               {"dropout", c.dropout},
          {"seed", c.seed},             {"eval_batch", c.eval_batch}, {"stop_below_loss", c.stop_below_loss}};
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean cross-entropy over the epoch's samples
  double val_az = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Network<float> best;
  std::size_t best_epoch = 0;
  double best_val_az = 0.0;
  double first_batch_loss = 0.0;
  std::vector<EpochStats> history;
};

/// Lesion-class probability for every sample of the set, in set order.
inline std::vector<float> predict_samples(const Network<float>& net, const SampleSet& set, std::size_t batch = 256) {
  std::vector<float> out(set.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    const std::size_t B = std::min(batch, set.size() - start);
    idx.resize(B);
    std::iota(idx.begin(), idx.end(), start);
    const auto p = net.predict(make_batch(set, idx, net.spec()));
    for (std::size_t b = 0; b < B; ++b) out[start + b] = p[b][1];
  }
  return out;
}

inline double evaluate_az(const Network<float>& net, const SampleSet& set, std::size_t batch = 256) {
  const auto scores = predict_samples(net, set, batch);
  return roc_curve(scores, set.labels).az;
}

/// Mean cross-entropy over the set in inference mode.
inline double evaluate_loss(const Network<float>& net, const SampleSet& set, std::size_t batch = 256) {
  const auto scores = predict_samples(net, set, batch);
  double loss = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double p = set.labels[i] ? scores[i] : 1.0 - scores[i];
    loss -= std::log(std::max(p, 1e-300));
  }
  return loss / static_cast<double>(set.size());
}

/// Dropout key for a sample within an epoch; masks change every epoch and never depend on
/// the batch a sample lands in.
inline std::uint64_t dropout_sample_key(std::size_t epoch, std::size_t sample) {
  return (static_cast<std::uint64_t>(epoch) << 40) ^ static_cast<std::uint64_t>(sample);
}

using EpochCallback = std::function<void(const EpochStats&)>;

/// Minibatch RMSprop on the balanced training set. After each epoch the validation Az is
/// measured and the best epoch's weights kept (earliest epoch on ties).
inline TrainResult train(NetworkSpec spec, const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  validate(config);
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (val_set.size() == 0) throw std::invalid_argument("train: empty validation set");
  spec.dropout = config.dropout;
  Network<float> net(spec);
  net.initialize(config.seed);
  const RmspropConfig opt{config.learning_rate, config.rho, config.epsilon};

  TrainResult result{net, 0, -1.0, 0.0, {}};
  std::vector<int> labels;
  std::vector<std::uint64_t> keys;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = shuffle_minibatches(train_set.size(), config.batch_size, config.seed, epoch);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      labels.resize(batch.size());
      keys.resize(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        labels[b] = train_set.labels[batch[b]];
        keys[b] = dropout_sample_key(epoch, batch[b]);
      }
      const DropoutKeys dk{config.seed, keys};
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi + 1) + " of " +
                                std::to_string(batches.size());
      double loss = 0.0;
      try {
        loss = net.train_batch(make_batch(train_set, batch, spec), labels, Mode::train, &dk);
      } catch (const std::invalid_argument& e) {
        throw std::runtime_error("train: " + where + ": " + e.what());
      }
      if (!std::isfinite(loss)) throw std::runtime_error("train: non-finite loss at " + where);
      if (epoch == 1 && bi == 0) result.first_batch_loss = loss / static_cast<double>(batch.size());
      total += loss;
      rmsprop_step(net.parameters(), opt);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = total / static_cast<double>(train_set.size());
    stats.val_az = evaluate_az(net, val_set, config.eval_batch);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(stats);
    if (stats.val_az > result.best_val_az) {
      result.best_val_az = stats.val_az;
      result.best_epoch = epoch;
      result.best = net;
    }
    if (on_epoch) on_epoch(stats);
    if (stats.train_loss < config.stop_below_loss) break;
  }
  return result;
}

/// stats.csv holds only run-determined values (epoch, train_loss, val_az) so that repeated
/// runs compare byte for byte; wall time goes to timing.csv.
inline void write_training_stats(const fs::path& dir, const std::vector<EpochStats>& history) {
  fs::create_directories(dir);
  std::ofstream stats(dir / "stats.csv"), timing(dir / "timing.csv");
  if (!stats || !timing) throw std::runtime_error("cannot write training stats in " + dir.string());
  stats << "epoch,train_loss,val_az\n" << std::setprecision(17);
  timing << "epoch,seconds\n" << std::setprecision(6);
  for (const auto& e : history) {
    stats << e.epoch << ',' << e.train_loss << ',' << e.val_az << '\n';
    timing << e.epoch << ',' << e.seconds << '\n';
  }
}

struct AlphaTrial {
  double alpha = 0.0;
  double val_az = 0.0;
  std::size_t best_epoch = 0;
};

struct AlphaSweepResult {
  std::vector<AlphaTrial> trials;
  double best_alpha = 0.0;
  TrainResult best;
};

inline const std::vector<double> kDefaultAlphaGrid = {0.1, 0.3, 1.0, 3.0, 10.0};

/// Trains once per alpha (same seed) and keeps the one with the highest validation Az;
/// the smallest alpha wins ties.
inline AlphaSweepResult sweep_alpha(NetworkSpec spec, const SampleSet& train_set, const SampleSet& val_set,
                                    const TrainConfig& config, std::vector<double> alphas = kDefaultAlphaGrid,
                                    const std::function<void(double, const EpochStats&)>& on_epoch = {}) {
  if (spec.injection == InjectionPoint::none) throw std::invalid_argument("sweep_alpha: network has no location injection");
  if (alphas.empty()) throw std::invalid_argument("sweep_alpha: empty alpha grid");
  std::sort(alphas.begin(), alphas.end());
  std::optional<AlphaSweepResult> out;
  for (double a : alphas) {
    spec.alpha = a;
    validate(spec);
    auto r = train(spec, train_set, val_set, config, [&](const EpochStats& e) {
      if (on_epoch) on_epoch(a, e);
    });
    const AlphaTrial trial{a, r.best_val_az, r.best_epoch};
    if (!out) {
      out = AlphaSweepResult{{trial}, a, std::move(r)};
      continue;
    }
    out->trials.push_back(trial);
    if (trial.val_az > out->best.best_val_az) {
      out->best_alpha = a;
      out->best = std::move(r);
    }
  }
  return std::move(*out);
}

}  // namespace locseg

#endif  // LOCSEG_TRAINER_HPP
