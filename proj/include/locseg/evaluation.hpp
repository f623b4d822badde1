#ifndef LOCSEG_EVALUATION_HPP
#define LOCSEG_EVALUATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "locseg/engine/rng.hpp"
#include "locseg/volume.hpp"

namespace locseg {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Counts over brain-mask voxels only.
inline ConfusionCounts confusion_counts(const MaskVolume& prediction, const MaskVolume& reference, const MaskVolume& brain) {
  check_same_grid(prediction, brain.dims, "confusion_counts prediction");
  check_same_grid(reference, brain.dims, "confusion_counts reference");
  ConfusionCounts c;
  for (std::size_t i = 0; i < brain.size(); ++i) {
    if (!brain[i]) continue;
    const bool p = prediction[i] != 0, r = reference[i] != 0;
    if (p && r) ++c.tp;
    else if (p) ++c.fp;
    else if (r) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// True when neither prediction nor reference has a positive voxel; dice() is 1 then.
inline bool both_empty(const ConfusionCounts& c) { return c.tp == 0 && c.fp == 0 && c.fn == 0; }

/// 2TP / (FP + FN + 2TP).
inline double dice(const ConfusionCounts& c) {
  if (both_empty(c)) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(c.fp + c.fn + 2 * c.tp);
}

// ---------------------------------------------------------------- ROC

struct RocPoint {
  double threshold;  // operating point: score >= threshold is called positive
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) at +inf to (1,1)
  double az = 0.0;
  std::uint64_t positives = 0, negatives = 0;
};

/// Empirical ROC over distinct score values. The trapezoid area is accumulated in integer
/// units (twice the area times P*N), which equals the count of correctly ordered pairs
/// doubled plus tied pairs, so Az matches the pairwise statistic exactly.
template <typename Score>
RocCurve roc_curve(std::span<const Score> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc: score and label counts differ");
  RocCurve roc;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(static_cast<double>(scores[i]))) throw std::invalid_argument("roc: non-finite score at index " + std::to_string(i));
    (labels[i] ? roc.positives : roc.negatives)++;
  }
  if (roc.positives == 0 || roc.negatives == 0) {
    throw std::invalid_argument("roc: Az is undefined with a single class (" + std::to_string(roc.positives) +
                                " positives, " + std::to_string(roc.negatives) + " negatives)");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const double P = static_cast<double>(roc.positives), N = static_cast<double>(roc.negatives);
  roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  unsigned __int128 twice_area = 0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const Score s = scores[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? tp : fp)++;
    twice_area += static_cast<unsigned __int128>(fp - fp0) * (tp0 + tp);
    roc.points.push_back({static_cast<double>(s), static_cast<double>(fp) / N, static_cast<double>(tp) / P});
  }
  roc.az = static_cast<double>(twice_area) / (2.0 * P * N);
  return roc;
}

template <typename Score>
RocCurve roc_curve(const std::vector<Score>& scores, const std::vector<std::uint8_t>& labels) {
  return roc_curve<Score>(std::span<const Score>(scores), std::span<const std::uint8_t>(labels));
}

/// Probability that a random positive outscores a random negative, ties counted half.
/// O(P*N); the independent reference for roc_curve().az.
template <typename Score>
double pairwise_auc(const std::vector<Score>& scores, const std::vector<std::uint8_t>& labels) {
  std::uint64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      twice += scores[i] > scores[j] ? 2 : scores[i] == scores[j] ? 1 : 0;
    }
  }
  if (pairs == 0) throw std::invalid_argument("pairwise_auc: single class");
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pairs));
}

inline void write_roc_csv(const fs::path& path, const RocCurve& roc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "threshold,fpr,tpr\n" << std::setprecision(17);
  for (const auto& p : roc.points) {
    if (std::isinf(p.threshold)) out << "inf";
    else out << p.threshold;
    out << ',' << p.fpr << ',' << p.tpr << '\n';
  }
}

// ---------------------------------------------------------------- thresholds

/// Voxelwise inputs for one case: probability map, reference and brain mask on one grid.
struct ScoredCase {
  const ImageVolume* probability = nullptr;
  const MaskVolume* reference = nullptr;
  const MaskVolume* brain = nullptr;
};

inline constexpr std::size_t kThresholdSteps = 100;

inline double grid_threshold(std::size_t k) { return static_cast<double>(k) / static_cast<double>(kThresholdSteps); }

/// Binary mask p > t (strict).
inline MaskVolume apply_threshold(const ImageVolume& probability, double t) {
  MaskVolume m(probability.dims, probability.voxel_size);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(probability[i]) > t ? 1 : 0;
  return m;
}

/// Pooled confusion counts at every grid threshold t_k = k/100, k = 0..100, computed in one pass.
inline std::vector<ConfusionCounts> pooled_counts_on_grid(const std::vector<ScoredCase>& cases) {
  std::vector<ConfusionCounts> counts(kThresholdSteps + 1);
  // hist[j]: voxels with exactly j grid thresholds strictly below p
  std::vector<std::uint64_t> pos_hist(kThresholdSteps + 2, 0), neg_hist(kThresholdSteps + 2, 0);
  std::uint64_t pos_total = 0, neg_total = 0;
  for (const auto& c : cases) {
    check_same_grid(*c.reference, c.probability->dims, "threshold reference");
    check_same_grid(*c.brain, c.probability->dims, "threshold brain mask");
    for (std::size_t i = 0; i < c.probability->size(); ++i) {
      if (!(*c.brain)[i]) continue;
      const double p = (*c.probability)[i];
      // number of k in [0, 100] with k/100 < p
      std::size_t below = 0;
      if (p > 0.0) {
        below = std::min<std::size_t>(kThresholdSteps + 1, static_cast<std::size_t>(std::ceil(p * kThresholdSteps)));
        while (below > 0 && !(grid_threshold(below - 1) < p)) --below;
        while (below <= kThresholdSteps && grid_threshold(below) < p) ++below;
      }
      if ((*c.reference)[i]) {
        ++pos_hist[below];
        ++pos_total;
      } else {
        ++neg_hist[below];
        ++neg_total;
      }
    }
  }
  // voxel is called positive at t_k when k < below
  std::uint64_t pos_above = pos_total, neg_above = neg_total;
  for (std::size_t k = 0; k <= kThresholdSteps; ++k) {
    pos_above -= pos_hist[k];
    neg_above -= neg_hist[k];
    counts[k] = {pos_above, neg_above, pos_total - pos_above, neg_total - neg_above};
  }
  return counts;
}

struct ThresholdChoice {
  double threshold = 0.0;
  double dice = 0.0;
  std::vector<double> dice_curve;  // pooled Dice at t_k, k = 0..100
};

/// Grid search for the threshold maximizing pooled Dice; ties go to the smallest t.
inline ThresholdChoice optimal_threshold(const std::vector<ScoredCase>& cases) {
  if (cases.empty()) throw std::invalid_argument("optimal_threshold: no cases");
  const auto counts = pooled_counts_on_grid(cases);
  ThresholdChoice best;
  best.dice = -1.0;
  for (std::size_t k = 0; k <= kThresholdSteps; ++k) {
    const double d = dice(counts[k]);
    best.dice_curve.push_back(d);
    if (d > best.dice) {
      best.dice = d;
      best.threshold = grid_threshold(k);
    }
  }
  return best;
}

// ---------------------------------------------------------------- bootstrap

struct BootstrapResult {
  std::size_t replicates = 0;
  std::size_t b_better = 0;
  std::size_t ties = 0;
  double p_value = 0.0;  // (b_better + ties/2) / replicates
  bool below_resolution = false;
  std::vector<double> dice_a, dice_b;

  /// "<0.01" style sentinel when no replicate favoured B, else the fraction.
  std::string p_string() const {
    if (below_resolution) {
      std::ostringstream s;
      s << '<' << 1.0 / static_cast<double>(replicates);
      return s.str();
    }
    std::ostringstream s;
    s << std::setprecision(6) << p_value;
    return s.str();
  }
};

/// Patient-level bootstrap: each replicate resamples case indices with replacement and
/// compares pooled Dice of A and B. p is the share of replicates where B beats A.
inline BootstrapResult bootstrap_compare(const std::vector<ConfusionCounts>& a, const std::vector<ConfusionCounts>& b,
                                         std::size_t replicates, std::uint64_t seed) {
  if (a.size() != b.size()) throw std::invalid_argument("bootstrap_compare: methods cover different case counts");
  if (a.empty()) throw std::invalid_argument("bootstrap_compare: no cases");
  if (replicates == 0) throw std::invalid_argument("bootstrap_compare: need at least one replicate");
  BootstrapResult r;
  r.replicates = replicates;
  const std::size_t n = a.size();
  for (std::size_t rep = 0; rep < replicates; ++rep) {
    CounterRng rng(seed, Purpose::bootstrap, rep);
    ConfusionCounts pa, pb;
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(rng.below(n));
      pa += a[k];
      pb += b[k];
    }
    const double da = dice(pa), db = dice(pb);
    r.dice_a.push_back(da);
    r.dice_b.push_back(db);
    if (db > da) ++r.b_better;
    else if (db == da) ++r.ties;
  }
  r.p_value = (static_cast<double>(r.b_better) + 0.5 * static_cast<double>(r.ties)) / static_cast<double>(replicates);
  r.below_resolution = r.b_better == 0 && r.ties == 0;
  return r;
}

// ---------------------------------------------------------------- subsets

/// Nested training subsets: one seeded permutation of the case list; fraction f keeps the
/// first floor(f * n) cases of it, so smaller fractions are prefixes of larger ones.
inline std::vector<std::vector<std::size_t>> nested_subsets(std::size_t n, const std::vector<double>& fractions,
                                                            std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(seed, Purpose::ablation);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("ablation fraction must be in (0, 1]");
    const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
    if (k == 0) {
      throw std::invalid_argument("ablation fraction " + std::to_string(f) + " of " + std::to_string(n) +
                                  " training cases leaves no case");
    }
    std::vector<std::size_t> subset(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(subset.begin(), subset.end());
    out.push_back(std::move(subset));
  }
  return out;
}

inline nlohmann::json to_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

inline ConfusionCounts counts_from_json(const nlohmann::json& j) {
  return {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("fn").get<std::uint64_t>(),
          j.at("tn").get<std::uint64_t>()};
}

}  // namespace locseg

#endif  // LOCSEG_EVALUATION_HPP
