#ifndef LOCSEG_LOCATION_FEATURES_HPP
#define LOCSEG_LOCATION_FEATURES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "locseg/volume.hpp"

namespace locseg {

/// Exact squared in-plane distance (mm^2) from every pixel of an X-by-Y slice to the nearest
/// target pixel; +inf when the slice has no target. Rows are scanned for the nearest target
/// column, then each column takes the minimum over rows, so every value is one of the
/// brute-force candidates (dx*sx)^2 + (dy*sy)^2.
inline std::vector<double> squared_distance_slice(const std::uint8_t* target, std::size_t nx, std::size_t ny, double sx,
                                                  double sy) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> row_d2(nx * ny, inf);
  std::vector<std::ptrdiff_t> nearest(nx);
  for (std::size_t y = 0; y < ny; ++y) {
    const std::uint8_t* row = target + y * nx;
    std::ptrdiff_t last = -1;
    for (std::size_t x = 0; x < nx; ++x) {
      if (row[x]) last = static_cast<std::ptrdiff_t>(x);
      nearest[x] = last;
    }
    std::ptrdiff_t next = -1;
    for (std::size_t x = nx; x-- > 0;) {
      if (row[x]) next = static_cast<std::ptrdiff_t>(x);
      std::size_t best = std::numeric_limits<std::size_t>::max();
      if (nearest[x] >= 0) best = x - static_cast<std::size_t>(nearest[x]);
      if (next >= 0) best = std::min(best, static_cast<std::size_t>(next) - x);
      if (best != std::numeric_limits<std::size_t>::max()) {
        const double dx = static_cast<double>(best) * sx;
        row_d2[y * nx + x] = dx * dx;
      }
    }
  }
  std::vector<double> out(nx * ny, inf);
  std::vector<double> dy2(ny);
  for (std::size_t d = 0; d < ny; ++d) dy2[d] = (static_cast<double>(d) * sy) * (static_cast<double>(d) * sy);
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t yy = 0; yy < ny; ++yy) {
      const double add = dy2[y > yy ? y - yy : yy - y];
      const double* src = row_d2.data() + yy * nx;
      double* dst = out.data() + y * nx;
      for (std::size_t x = 0; x < nx; ++x) dst[x] = std::min(dst[x], src[x] + add);
    }
  return out;
}

/// Min-max normalizes over mask voxels to [0,1] in place, clamping everything else.
inline void normalize_in_mask(ImageVolume& v, const MaskVolume& mask) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask[i]) {
      lo = std::min(lo, static_cast<double>(v[i]));
      hi = std::max(hi, static_cast<double>(v[i]));
    }
  if (!(hi > lo)) {
    std::fill(v.values.begin(), v.values.end(), 0.0f);
    return;
  }
  for (auto& x : v.values) x = static_cast<float>(std::clamp((static_cast<double>(x) - lo) / (hi - lo), 0.0, 1.0));
}

/// Per-slice Euclidean distance in mm to the nearest target voxel, before normalization.
/// Slices without target get the largest finite distance of the case (or the slice
/// diagonal when the whole case has no target).
inline ImageVolume inplane_distance_mm(const MaskVolume& target) {
  const auto [nx, ny, nz] = target.dims;
  const double sx = target.voxel_size[0], sy = target.voxel_size[1];
  ImageVolume out(target.dims, target.voxel_size);
  double finite_max = -1.0;
  std::vector<bool> empty(nz, false);
  for (std::size_t z = 0; z < nz; ++z) {
    const auto d2 = squared_distance_slice(target.values.data() + z * nx * ny, nx, ny, sx, sy);
    empty[z] = std::isinf(d2[0]);
    if (empty[z]) continue;
    for (std::size_t i = 0; i < nx * ny; ++i) {
      const double d = std::sqrt(d2[i]);
      out.values[z * nx * ny + i] = static_cast<float>(d);
      finite_max = std::max(finite_max, d);
    }
  }
  if (finite_max < 0.0) finite_max = std::hypot(static_cast<double>(nx) * sx, static_cast<double>(ny) * sy);
  for (std::size_t z = 0; z < nz; ++z)
    if (empty[z]) std::fill_n(out.values.begin() + z * nx * ny, nx * ny, static_cast<float>(finite_max));
  return out;
}

inline ImageVolume inplane_distance_map(const MaskVolume& target, const MaskVolume& brain_mask) {
  check_same_grid(brain_mask, target.dims, "inplane_distance_map brain mask");
  ImageVolume d = inplane_distance_mm(target);
  normalize_in_mask(d, brain_mask);
  return d;
}

/// Brain-mask voxels with at least one in-slice 4-neighbour outside the mask (or outside the volume).
inline MaskVolume brain_boundary(const MaskVolume& brain_mask) {
  const auto [nx, ny, nz] = brain_mask.dims;
  MaskVolume b(brain_mask.dims, brain_mask.voxel_size);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        if (!brain_mask(x, y, z)) continue;
        const bool edge = x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || !brain_mask(x - 1, y, z) ||
                          !brain_mask(x + 1, y, z) || !brain_mask(x, y - 1, z) || !brain_mask(x, y + 1, z);
        b(x, y, z) = edge ? 1 : 0;
      }
  return b;
}

inline ImageVolume cortex_distance_mm(const MaskVolume& brain_mask) { return inplane_distance_mm(brain_boundary(brain_mask)); }

inline ImageVolume cortex_distance_map(const MaskVolume& brain_mask) {
  ImageVolume d = cortex_distance_mm(brain_mask);
  normalize_in_mask(d, brain_mask);
  return d;
}

inline double brain_centroid_x(const MaskVolume& brain_mask) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < brain_mask.size(); ++i)
    if (brain_mask[i]) {
      sum += static_cast<double>(i % brain_mask.dims[0]);
      ++count;
    }
  if (count == 0) throw std::invalid_argument("brain mask is empty");
  return sum / static_cast<double>(count);
}

/// |x - centroid_x| * spacing_x: distance to the vertical plane through the brain centroid.
inline ImageVolume midsagittal_distance_mm(const MaskVolume& brain_mask) {
  const double mid = brain_centroid_x(brain_mask);
  ImageVolume out(brain_mask.dims, brain_mask.voxel_size);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(std::abs(static_cast<double>(i % out.dims[0]) - mid) * out.voxel_size[0]);
  return out;
}

inline ImageVolume midsagittal_distance_map(const MaskVolume& brain_mask) {
  ImageVolume d = midsagittal_distance_mm(brain_mask);
  normalize_in_mask(d, brain_mask);
  return d;
}

/// Brain-bounding-box normalized x, y, z coordinates, clamped to [0,1] outside the box.
inline std::array<ImageVolume, 3> normalized_coordinates(const MaskVolume& brain_mask) {
  std::array<std::size_t, 3> lo{brain_mask.dims}, hi{0, 0, 0};
  bool any = false;
  for (std::size_t i = 0; i < brain_mask.size(); ++i) {
    if (!brain_mask[i]) continue;
    any = true;
    const auto c = brain_mask.coords(i);
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a]);
    }
  }
  if (!any) throw std::invalid_argument("normalized_coordinates: brain mask is empty");
  std::array<ImageVolume, 3> out;
  for (int a = 0; a < 3; ++a) out[a] = ImageVolume(brain_mask.dims, brain_mask.voxel_size);
  for (std::size_t i = 0; i < brain_mask.size(); ++i) {
    const auto c = brain_mask.coords(i);
    for (int a = 0; a < 3; ++a) {
      const double span = static_cast<double>(hi[a]) - static_cast<double>(lo[a]);
      const double t = span > 0 ? (static_cast<double>(c[a]) - static_cast<double>(lo[a])) / span : 0.0;
      out[a][i] = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
  }
  return out;
}

/// 1D Gaussian taps for sigma (in voxels), truncated at 3 sigma.
inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (std::ptrdiff_t i = -radius; i <= radius; ++i)
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  return k;
}

/// Separable in-plane Gaussian smoothing. Taps falling outside the slice are dropped and the
/// remaining weights renormalized, so values stay inside the input range.
inline ImageVolume smooth_inplane(const ImageVolume& v, double sigma) {
  if (sigma <= 0.0) return v;
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto [nx, ny, nz] = v.dims;
  ImageVolume tmp(v.dims, v.voxel_size), out(v.dims, v.voxel_size);
  auto pass = [&](const ImageVolume& src, ImageVolume& dst, bool along_x) {
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
          double acc = 0.0, wsum = 0.0;
          for (std::ptrdiff_t t = -r; t <= r; ++t) {
            const auto xx = static_cast<std::ptrdiff_t>(x) + (along_x ? t : 0);
            const auto yy = static_cast<std::ptrdiff_t>(y) + (along_x ? 0 : t);
            if (xx < 0 || yy < 0 || xx >= static_cast<std::ptrdiff_t>(nx) || yy >= static_cast<std::ptrdiff_t>(ny)) continue;
            const double w = k[static_cast<std::size_t>(t + r)];
            acc += w * src(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy), z);
            wsum += w;
          }
          dst(x, y, z) = static_cast<float>(acc / wsum);
        }
  };
  pass(v, tmp, true);
  pass(tmp, out, false);
  for (auto& x : out.values) x = std::clamp(x, 0.0f, 1.0f);
  return out;
}

/// Voxelwise mean of training annotations, then in-plane Gaussian smoothing (sigma in voxels; 0 disables).
inline ImageVolume prior_probability_map(const std::vector<const MaskVolume*>& annotations, double sigma = 2.0) {
  if (annotations.empty()) throw std::invalid_argument("prior_probability_map: no training cases");
  const Dims dims = annotations.front()->dims;
  std::vector<std::uint32_t> counts(annotations.front()->size(), 0);
  for (const MaskVolume* a : annotations) {
    check_same_grid(*a, dims, "prior_probability_map annotation");
    for (std::size_t i = 0; i < a->size(); ++i) counts[i] += (*a)[i];
  }
  ImageVolume mean(dims, annotations.front()->voxel_size);
  const double n = static_cast<double>(annotations.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(counts[i] / n);
  return smooth_inplane(mean, sigma);
}

inline ImageVolume prior_probability_map(const std::vector<CaseRecord>& training_cases, double sigma = 2.0) {
  std::vector<const MaskVolume*> a;
  for (const auto& c : training_cases) a.push_back(&c.annotation);
  return prior_probability_map(a, sigma);
}

/// The eight features in fixed order: coord_x, coord_y, coord_z, dist_left_ventricle,
/// dist_right_ventricle, dist_cortex, dist_midsagittal, wmh_prior; each normalized per case.
inline LocationFeatureSet assemble_location_features(const CaseRecord& c, const ImageVolume& prior) {
  check_same_grid(prior, c.brain_mask.dims, c.case_id + " prior map");
  auto coords = normalized_coordinates(c.brain_mask);
  LocationFeatureSet set;
  set[0] = std::move(coords[0]);
  set[1] = std::move(coords[1]);
  set[2] = std::move(coords[2]);
  set[3] = inplane_distance_map(c.ventricle_left, c.brain_mask);
  set[4] = inplane_distance_map(c.ventricle_right, c.brain_mask);
  set[5] = cortex_distance_map(c.brain_mask);
  set[6] = midsagittal_distance_map(c.brain_mask);
  set[7] = prior;
  set[7].voxel_size = c.brain_mask.voxel_size;
  normalize_in_mask(set[7], c.brain_mask);
  return set;
}

/// Loads features from `case_dir/location` when present (range-validated), else computes them.
/// Returns true when they were loaded rather than computed.
inline bool ensure_location_features(CaseRecord& c, const fs::path& case_dir, const ImageVolume* prior) {
  if (has_location_features(case_dir)) {
    c.location_features = load_location_features(case_dir, c.dims(), c.voxel_size());
    validate_case(c);
    return true;
  }
  if (!prior) throw std::invalid_argument(c.case_id + ": location features missing and no prior map given");
  c.location_features = assemble_location_features(c, *prior);
  return false;
}

}  // namespace locseg

#endif  // LOCSEG_LOCATION_FEATURES_HPP
