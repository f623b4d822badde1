#ifndef LOCSEG_SYNTH_HPP
#define LOCSEG_SYNTH_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "locseg/engine/parallel.hpp"
#include "locseg/engine/rng.hpp"
#include "locseg/evaluation.hpp"
#include "locseg/location_features.hpp"
#include "locseg/volume.hpp"

namespace locseg {

// Phantom layout: an air-surrounded head cylinder holding an ellipsoidal brain with two
// ventricles. Brain, ventricles and extra-cerebral tissue share one intensity, so only the
// hyperintense blobs are visible. Lesion blobs sit next to the ventricles; decoy blobs with
// the same size and contrast distribution sit next to the brain boundary.
struct SynthConfig {
  std::size_t cases = 20;
  Dims dims{96, 96, 6};
  Spacing voxel_size{1.0, 1.0, 5.0};
  double head_radius_mm = 44.0;
  std::array<double, 3> brain_radii_mm{21.0, 18.0, 17.0};
  double tissue_flair = 0.5;
  double tissue_t1 = 0.6;
  double contrast_min = 0.25;  // FLAIR increase inside a blob
  double contrast_max = 0.40;
  double t1_contrast_ratio = 0.5;  // T1 decrease as a fraction of the FLAIR increase
  double blob_radius_min_mm = 1.2;
  double blob_radius_max_mm = 2.2;
  std::size_t lesions_min = 2;
  std::size_t lesions_max = 4;
  double decoy_rate = 40.0;  // decoy blobs per lesion blob
  double prone_band_mm = 6.0;
  double cortex_band_mm = 4.0;
  double noise_sigma = 0.04;
  double bias_amplitude = 0.05;
  std::array<double, 3> split_fractions{2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0};
  std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& c) {
  auto bad = [](const std::string& m) { throw std::invalid_argument("synth: " + m); };
  if (c.cases == 0) bad("case count must be positive");
  if (c.dims[0] < 32 || c.dims[1] < 32 || c.dims[2] == 0) bad("dims too small: in-plane extent must be at least 32 voxels");
  for (double s : c.voxel_size)
    if (!(s > 0.0)) bad("voxel size must be positive");
  const double half_x = 0.5 * static_cast<double>(c.dims[0] - 1) * c.voxel_size[0];
  const double half_y = 0.5 * static_cast<double>(c.dims[1] - 1) * c.voxel_size[1];
  if (c.head_radius_mm + 2.0 > std::min(half_x, half_y))
    bad("dims too small for a head of radius " + std::to_string(c.head_radius_mm) + " mm");
  if (std::max(c.brain_radii_mm[0], c.brain_radii_mm[1]) * 1.08 + 4.0 > c.head_radius_mm)
    bad("brain radii must leave room inside the head");
  if (c.brain_radii_mm[2] <= 0.0) bad("brain radii must be positive");
  if (!(c.contrast_min > 0.0 && c.contrast_min <= c.contrast_max)) bad("need 0 < contrast_min <= contrast_max");
  if (!(c.blob_radius_min_mm > 0.0 && c.blob_radius_min_mm <= c.blob_radius_max_mm)) bad("bad blob radius range");
  if (c.lesions_min == 0 || c.lesions_min > c.lesions_max) bad("need 1 <= lesions_min <= lesions_max");
  if (!(c.decoy_rate >= 0.0)) bad("decoy rate must be non-negative");
  if (!(c.noise_sigma > 0.0)) bad("noise sigma must be positive");
  if (!(c.bias_amplitude >= 0.0 && c.bias_amplitude < 0.5)) bad("bias amplitude must lie in [0, 0.5)");
  if (!(c.prone_band_mm > 0.0 && c.cortex_band_mm > 0.0)) bad("band widths must be positive");
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"cases", c.cases},
          {"dims", c.dims},
          {"voxel_size_mm", c.voxel_size},
          {"head_radius_mm", c.head_radius_mm},
          {"brain_radii_mm", c.brain_radii_mm},
          {"tissue_flair", c.tissue_flair},
          {"tissue_t1", c.tissue_t1},
          {"contrast_min", c.contrast_min},
          {"contrast_max", c.contrast_max},
          {"t1_contrast_ratio", c.t1_contrast_ratio},
          {"blob_radius_min_mm", c.blob_radius_min_mm},
          {"blob_radius_max_mm", c.blob_radius_max_mm},
          {"lesions_min", c.lesions_min},
          {"lesions_max", c.lesions_max},
          {"decoy_rate", c.decoy_rate},
          {"prone_band_mm", c.prone_band_mm},
          {"cortex_band_mm", c.cortex_band_mm},
          {"noise_sigma", c.noise_sigma},
          {"bias_amplitude", c.bias_amplitude},
          {"split_fractions", c.split_fractions},
          {"seed", c.seed}};
}

struct Blob {
  std::size_t x = 0, y = 0, z = 0;
  double radius_mm = 0.0;
  double contrast = 0.0;
};

struct SyntheticCase {
  CaseRecord record;
  MaskVolume decoys;  // decoy voxels (not written to disk)
  MaskVolume prone_band;
  MaskVolume cortex_band;
  std::vector<Blob> lesions;
  std::vector<Blob> decoy_blobs;
};

inline std::string synth_case_id(std::size_t index) {
  std::string n = std::to_string(index);
  return "case_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

namespace detail {

/// Places `count` blobs centred on random band voxels; blob voxels are clipped to the band.
inline std::vector<Blob> place_blobs(const MaskVolume& band, std::size_t count, const SynthConfig& cfg, CounterRng rng,
                                     MaskVolume& hit, std::vector<float>& contrast) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < band.size(); ++i)
    if (band[i]) candidates.push_back(i);
  std::vector<Blob> blobs;
  if (candidates.empty()) return blobs;
  const auto& vs = band.voxel_size;
  // Stratified contrasts: still uniform per blob, but each case's blob mean stays near the
  // centre of the range, so lesion and decoy intensities agree closely on small cohorts.
  std::vector<std::size_t> strata(count);
  std::iota(strata.begin(), strata.end(), 0);
  for (std::size_t i = count; i > 1; --i) std::swap(strata[i - 1], strata[rng.below(i)]);
  for (std::size_t b = 0; b < count; ++b) {
    const auto c = band.coords(candidates[rng.below(candidates.size())]);
    const double u = (static_cast<double>(strata[b]) + rng.uniform()) / static_cast<double>(count);
    Blob blob{c[0], c[1], c[2], rng.uniform(cfg.blob_radius_min_mm, cfg.blob_radius_max_mm),
              cfg.contrast_min + u * (cfg.contrast_max - cfg.contrast_min)};
    const auto rx = static_cast<std::ptrdiff_t>(std::ceil(blob.radius_mm / vs[0]));
    const auto ry = static_cast<std::ptrdiff_t>(std::ceil(blob.radius_mm / vs[1]));
    for (std::ptrdiff_t dy = -ry; dy <= ry; ++dy)
      for (std::ptrdiff_t dx = -rx; dx <= rx; ++dx) {
        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(blob.x) + dx, y = static_cast<std::ptrdiff_t>(blob.y) + dy;
        if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(band.dims[0]) || y >= static_cast<std::ptrdiff_t>(band.dims[1]))
          continue;
        if (std::hypot(dx * vs[0], dy * vs[1]) > blob.radius_mm) continue;
        const std::size_t i = band.index(static_cast<std::size_t>(x), static_cast<std::size_t>(y), blob.z);
        if (!band[i]) continue;
        // First blob wins on overlap; taking the max would bias crowded decoys brighter.
        if (!hit[i]) contrast[i] = static_cast<float>(blob.contrast);
        hit[i] = 1;
      }
    blobs.push_back(blob);
  }
  return blobs;
}

}  // namespace detail

/// One phantom; fully determined by (config.seed, index).
inline SyntheticCase synthesize_case(const SynthConfig& cfg, std::size_t index) {
  validate(cfg);
  const Dims d = cfg.dims;
  const Spacing vs = cfg.voxel_size;
  CounterRng rng(cfg.seed, Purpose::synth, index);
  CounterRng geo = rng.substream(0), lesion_rng = rng.substream(1), decoy_rng = rng.substream(2),
             noise_rng = rng.substream(3);

  const double cx = 0.5 * static_cast<double>(d[0] - 1) * vs[0] + geo.uniform(-2.0, 2.0);
  const double cy = 0.5 * static_cast<double>(d[1] - 1) * vs[1] + geo.uniform(-2.0, 2.0);
  const double cz = 0.5 * static_cast<double>(d[2] - 1) * vs[2];
  std::array<double, 3> br{};
  for (int a = 0; a < 3; ++a) br[a] = cfg.brain_radii_mm[a] * geo.uniform(0.92, 1.08);
  const double head_r = cfg.head_radius_mm * geo.uniform(0.95, 1.0);
  struct Ellipsoid {
    double x, y, z, rx, ry, rz;
    bool contains(double px, double py, double pz) const {
      const double ex = (px - x) / rx, ey = (py - y) / ry, ez = (pz - z) / rz;
      return ex * ex + ey * ey + ez * ez <= 1.0;
    }
  };
  const Ellipsoid brain{cx, cy, cz, br[0], br[1], br[2]};
  std::array<Ellipsoid, 2> ventricles;
  for (int side = 0; side < 2; ++side) {
    const double offset = br[0] * geo.uniform(0.18, 0.24);
    ventricles[side] = {cx + (side == 0 ? -offset : offset), cy + geo.uniform(-1.0, 1.0), cz,
                        br[0] * geo.uniform(0.10, 0.14), br[1] * geo.uniform(0.30, 0.38), br[2] * geo.uniform(0.7, 0.85)};
  }
  const double bias = geo.uniform(-cfg.bias_amplitude, cfg.bias_amplitude);
  const double bias_angle = geo.uniform(0.0, 2.0 * std::numbers::pi);

  SyntheticCase out;
  CaseRecord& c = out.record;
  c.case_id = synth_case_id(index);
  c.flair = ImageVolume(d, vs);
  c.t1 = ImageVolume(d, vs);
  c.brain_mask = MaskVolume(d, vs);
  c.annotation = MaskVolume(d, vs);
  c.ventricle_left = MaskVolume(d, vs);
  c.ventricle_right = MaskVolume(d, vs);
  MaskVolume head(d, vs), ventricles_any(d, vs);
  for (std::size_t i = 0; i < c.brain_mask.size(); ++i) {
    const auto p = c.brain_mask.coords(i);
    const double px = p[0] * vs[0], py = p[1] * vs[1], pz = p[2] * vs[2];
    head[i] = std::hypot(px - cx, py - cy) <= head_r;
    c.brain_mask[i] = brain.contains(px, py, pz);
    c.ventricle_left[i] = c.brain_mask[i] && ventricles[0].contains(px, py, pz);
    c.ventricle_right[i] = c.brain_mask[i] && ventricles[1].contains(px, py, pz);
    ventricles_any[i] = c.ventricle_left[i] | c.ventricle_right[i];
  }

  const ImageVolume ventricle_mm = inplane_distance_mm(ventricles_any);
  const ImageVolume cortex_mm = cortex_distance_mm(c.brain_mask);
  out.prone_band = MaskVolume(d, vs);
  out.cortex_band = MaskVolume(d, vs);
  for (std::size_t i = 0; i < c.brain_mask.size(); ++i) {
    if (!c.brain_mask[i] || ventricles_any[i]) continue;
    out.prone_band[i] = ventricle_mm[i] <= cfg.prone_band_mm;
    out.cortex_band[i] = cortex_mm[i] <= cfg.cortex_band_mm && ventricle_mm[i] > cfg.prone_band_mm + 3.0;
  }

  std::vector<float> contrast(c.brain_mask.size(), 0.0f);
  const std::size_t n_lesions = cfg.lesions_min + lesion_rng.below(cfg.lesions_max - cfg.lesions_min + 1);
  out.lesions = detail::place_blobs(out.prone_band, n_lesions, cfg, lesion_rng, c.annotation, contrast);
  out.decoys = MaskVolume(d, vs);
  const auto n_decoys = static_cast<std::size_t>(std::lround(cfg.decoy_rate * static_cast<double>(n_lesions)));
  out.decoy_blobs = detail::place_blobs(out.cortex_band, n_decoys, cfg, decoy_rng, out.decoys, contrast);

  const double ux = std::cos(bias_angle), uy = std::sin(bias_angle);
  for (std::size_t i = 0; i < c.flair.size(); ++i) {
    const auto p = c.flair.coords(i);
    const double px = p[0] * vs[0], py = p[1] * vs[1];
    double flair = 0.0, t1 = 0.0;
    if (head[i]) {
      const double gain = 1.0 + bias * ((px - cx) * ux + (py - cy) * uy) / head_r;
      flair = gain * (cfg.tissue_flair + contrast[i]);
      t1 = gain * (cfg.tissue_t1 - cfg.t1_contrast_ratio * contrast[i]);
    }
    c.flair[i] = static_cast<float>(flair + cfg.noise_sigma * noise_rng.normal());
    c.t1[i] = static_cast<float>(t1 + cfg.noise_sigma * noise_rng.normal());
  }
  return out;
}

struct GateReport {
  std::size_t cases = 0;
  std::size_t lesion_voxels = 0;
  std::size_t decoy_voxels = 0;
  double location_az = 0.0;  // linear discriminant on the 8 location features
  double flair_az = 0.0;     // best single FLAIR threshold, either direction
  double flair_mean_difference = 0.0;  // lesion mean minus decoy mean
  bool passed = false;

  static constexpr double kMinLocationAz = 0.9;
  static constexpr double kMaxFlairAz = 0.7;
};

inline nlohmann::json to_json(const GateReport& g) {
  return {{"cases", g.cases},
          {"lesion_voxels", g.lesion_voxels},
          {"decoy_voxels", g.decoy_voxels},
          {"location_az", g.location_az},
          {"location_az_min", GateReport::kMinLocationAz},
          {"flair_az", g.flair_az},
          {"flair_az_max", GateReport::kMaxFlairAz},
          {"flair_mean_difference", g.flair_mean_difference},
          {"passed", g.passed}};
}

/// Solves A x = b (n x n, row-major) by Gaussian elimination with partial pivoting.
inline std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (a[piv * n + col] == 0.0) throw std::runtime_error("solve_linear: singular matrix");
    if (piv != col) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[piv * n + k]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (std::size_t k = col; k < n; ++k) a[r * n + k] -= f * a[col * n + k];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t r = n; r-- > 0;) {
    double s = b[r];
    for (std::size_t k = r + 1; k < n; ++k) s -= a[r * n + k] * x[k];
    x[r] = s / a[r * n + r];
  }
  return x;
}

/// Fisher discriminant direction for two classes of 8-vectors (ridge-regularized pooled covariance).
inline std::array<double, kLocationFeatureCount> fisher_direction(const std::vector<std::array<double, kLocationFeatureCount>>& neg,
                                                                 const std::vector<std::array<double, kLocationFeatureCount>>& pos) {
  constexpr std::size_t n = kLocationFeatureCount;
  std::array<double, n> m0{}, m1{};
  for (const auto& v : neg)
    for (std::size_t k = 0; k < n; ++k) m0[k] += v[k] / static_cast<double>(neg.size());
  for (const auto& v : pos)
    for (std::size_t k = 0; k < n; ++k) m1[k] += v[k] / static_cast<double>(pos.size());
  std::vector<double> s(n * n, 0.0);
  auto accumulate = [&](const auto& set, const auto& m) {
    for (const auto& v : set)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s[i * n + j] += (v[i] - m[i]) * (v[j] - m[j]);
  };
  accumulate(neg, m0);
  accumulate(pos, m1);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += s[i * n + i];
  for (std::size_t i = 0; i < n; ++i) s[i * n + i] += 1e-6 * trace / n + 1e-12;
  std::vector<double> diff(n);
  for (std::size_t k = 0; k < n; ++k) diff[k] = m1[k] - m0[k];
  const auto w = solve_linear(s, diff);
  std::array<double, n> out{};
  std::copy(w.begin(), w.end(), out.begin());
  return out;
}

/// Checks that lesion and decoy voxels are separable from location but not from FLAIR.
/// The prior feature is built from the checked cases' own annotations.
inline GateReport check_generation_gates(const std::vector<SyntheticCase>& cases) {
  if (cases.empty()) throw std::invalid_argument("synth gates: no cases");
  std::vector<const MaskVolume*> annotations;
  for (const auto& c : cases) annotations.push_back(&c.record.annotation);
  const ImageVolume prior = prior_probability_map(annotations);
  std::vector<std::array<double, kLocationFeatureCount>> lesion_loc, decoy_loc;
  std::vector<float> flair_scores;
  std::vector<std::uint8_t> labels;
  double lesion_sum = 0.0, decoy_sum = 0.0;
  for (const auto& sc : cases) {
    const auto features = assemble_location_features(sc.record, prior);
    for (std::size_t i = 0; i < sc.record.annotation.size(); ++i) {
      const bool lesion = sc.record.annotation[i], decoy = sc.decoys[i] && !lesion;
      if (!lesion && !decoy) continue;
      std::array<double, kLocationFeatureCount> v{};
      for (std::size_t k = 0; k < kLocationFeatureCount; ++k) v[k] = features[k][i];
      (lesion ? lesion_loc : decoy_loc).push_back(v);
      flair_scores.push_back(sc.record.flair[i]);
      labels.push_back(lesion);
      (lesion ? lesion_sum : decoy_sum) += sc.record.flair[i];
    }
  }
  GateReport g;
  g.cases = cases.size();
  g.lesion_voxels = lesion_loc.size();
  g.decoy_voxels = decoy_loc.size();
  if (lesion_loc.empty() || decoy_loc.empty()) return g;
  const auto w = fisher_direction(decoy_loc, lesion_loc);
  std::vector<double> loc_scores;
  std::size_t li = 0, di = 0;
  for (auto y : labels) {
    const auto& v = y ? lesion_loc[li++] : decoy_loc[di++];
    double s = 0.0;
    for (std::size_t k = 0; k < kLocationFeatureCount; ++k) s += w[k] * v[k];
    loc_scores.push_back(s);
  }
  g.location_az = roc_curve(loc_scores, labels).az;
  const double flair_az = roc_curve(flair_scores, labels).az;
  g.flair_az = std::max(flair_az, 1.0 - flair_az);
  g.flair_mean_difference = lesion_sum / static_cast<double>(g.lesion_voxels) - decoy_sum / static_cast<double>(g.decoy_voxels);
  g.passed = g.location_az > GateReport::kMinLocationAz && g.flair_az < GateReport::kMaxFlairAz;
  return g;
}

inline constexpr std::size_t kGateCases = 20;

struct SynthResult {
  CohortManifest manifest;
  GateReport gates;
};

/// Writes every case directory, manifest.json (with seeded splits) and synth.json.
/// Throws when the generation gates fail; nothing is written in that case.
inline SynthResult generate_cohort(const SynthConfig& cfg, const fs::path& out_dir) {
  validate(cfg);
  std::vector<SyntheticCase> cases(cfg.cases);
  parallel_for(cfg.cases, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) cases[i] = synthesize_case(cfg, i);
  });
  const std::vector<SyntheticCase> gate_cases(cases.begin(), cases.begin() + std::min(cfg.cases, kGateCases));
  SynthResult result;
  result.gates = check_generation_gates(gate_cases);
  if (!result.gates.passed) {
    throw std::runtime_error("synth: generation gates failed (location Az " + std::to_string(result.gates.location_az) +
                             ", FLAIR Az " + std::to_string(result.gates.flair_az) + ")");
  }
  CohortManifest manifest;
  for (const auto& c : cases) manifest.push_back({c.record.case_id, Split::train});
  manifest = split_cohort(manifest, cfg.split_fractions, cfg.seed);
  fs::create_directories(out_dir);
  parallel_for(cfg.cases, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) save_case(out_dir / cases[i].record.case_id, cases[i].record);
  });
  write_manifest(out_dir / "manifest.json", manifest);
  std::ofstream(out_dir / "synth.json") << nlohmann::json{{"config", to_json(cfg)}, {"gates", to_json(result.gates)}}.dump(2)
                                        << '\n';
  result.manifest = std::move(manifest);
  return result;
}

}  // namespace locseg

#endif  // LOCSEG_SYNTH_HPP
