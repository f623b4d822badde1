#ifndef LOCSEG_VOLUME_HPP
#define LOCSEG_VOLUME_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "locseg/engine/rng.hpp"

namespace locseg {

namespace fs = std::filesystem;

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

/// 3D scalar grid, x fastest: index = x + X*(y + Y*z).
template <typename T>
struct Volume {
  Dims dims{0, 0, 0};
  Spacing voxel_size{1.0, 1.0, 1.0};
  std::vector<T> values;

  Volume() = default;
  Volume(Dims d, Spacing s, T fill = T{0}) : dims(d), voxel_size(s), values(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return values.size(); }
  std::size_t slice_size() const { return dims[0] * dims[1]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims[0] * (y + dims[1] * z); }
  std::array<std::size_t, 3> coords(std::size_t i) const {
    return {i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])};
  }
  T& operator()(std::size_t x, std::size_t y, std::size_t z) { return values[index(x, y, z)]; }
  const T& operator()(std::size_t x, std::size_t y, std::size_t z) const { return values[index(x, y, z)]; }
  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using ImageVolume = Volume<float>;
using MaskVolume = Volume<std::uint8_t>;

inline constexpr std::size_t kLocationFeatureCount = 8;
using LocationFeatureSet = std::array<ImageVolume, kLocationFeatureCount>;
inline const std::array<const char*, kLocationFeatureCount> kLocationFeatureNames = {
    "coord_x", "coord_y", "coord_z", "dist_left_ventricle", "dist_right_ventricle",
    "dist_cortex", "dist_midsagittal", "wmh_prior"};

struct CaseRecord {
  std::string case_id;
  ImageVolume flair;
  ImageVolume t1;
  MaskVolume brain_mask;
  MaskVolume annotation;
  MaskVolume ventricle_left;
  MaskVolume ventricle_right;
  std::optional<LocationFeatureSet> location_features;

  Dims dims() const { return flair.dims; }
  Spacing voxel_size() const { return flair.voxel_size; }
};

// ---------------------------------------------------------------- raw I/O

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// Reads exactly `count` elements; a size mismatch is a distinct diagnostic.
template <typename T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
  if (!fs::exists(path)) throw std::runtime_error("missing file: " + path.string());
  const auto bytes = fs::file_size(path);
  if (bytes != count * sizeof(T)) {
    throw std::runtime_error("dim mismatch: " + path.string() + " holds " + std::to_string(bytes) +
                             " bytes, expected " + std::to_string(count * sizeof(T)) + " for the dims in meta.json");
  }
  std::vector<T> values(count);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("failed reading " + path.string());
  return values;
}

template <typename T>
void check_same_grid(const Volume<T>& v, const Dims& dims, const std::string& what) {
  if (v.dims != dims) {
    throw std::invalid_argument(what + ": dims [" + std::to_string(v.dims[0]) + "," + std::to_string(v.dims[1]) + "," +
                                std::to_string(v.dims[2]) + "] differ from the case grid");
  }
}

inline void check_binary(const MaskVolume& m, const std::string& what) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] > 1) {
      throw std::invalid_argument("non-binary mask: " + what + " has value " + std::to_string(m[i]) +
                                  " at voxel index " + std::to_string(i));
    }
  }
}

/// Checks every CaseRecord invariant; throws with a specific diagnostic.
inline void validate_case(const CaseRecord& c) {
  const Dims d = c.flair.dims;
  if (d[0] == 0 || d[1] == 0 || d[2] == 0) throw std::invalid_argument(c.case_id + ": dims must be positive");
  check_same_grid(c.t1, d, c.case_id + " t1");
  check_same_grid(c.brain_mask, d, c.case_id + " brain_mask");
  check_same_grid(c.annotation, d, c.case_id + " annotation");
  check_same_grid(c.ventricle_left, d, c.case_id + " ventricle_left");
  check_same_grid(c.ventricle_right, d, c.case_id + " ventricle_right");
  check_binary(c.brain_mask, c.case_id + " brain_mask");
  check_binary(c.annotation, c.case_id + " annotation");
  check_binary(c.ventricle_left, c.case_id + " ventricle_left");
  check_binary(c.ventricle_right, c.case_id + " ventricle_right");
  for (std::size_t i = 0; i < c.annotation.size(); ++i) {
    if (c.annotation[i] && !c.brain_mask[i]) {
      const auto xyz = c.annotation.coords(i);
      throw std::invalid_argument(c.case_id + ": annotation outside brain mask at voxel index " + std::to_string(i) +
                                  " (x=" + std::to_string(xyz[0]) + ", y=" + std::to_string(xyz[1]) +
                                  ", z=" + std::to_string(xyz[2]) + ")");
    }
  }
  if (c.location_features) {
    for (std::size_t f = 0; f < kLocationFeatureCount; ++f) {
      const auto& v = (*c.location_features)[f];
      check_same_grid(v, d, c.case_id + " location feature " + kLocationFeatureNames[f]);
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]) || (c.brain_mask[i] && (v[i] < 0.0f || v[i] > 1.0f))) {
          throw std::invalid_argument(c.case_id + ": location feature " + kLocationFeatureNames[f] +
                                      " out of [0,1] at voxel index " + std::to_string(i));
        }
      }
    }
  }
}

inline fs::path location_feature_path(const fs::path& case_dir, std::size_t f) {
  return case_dir / "location" / ("feat_" + std::to_string(f) + ".f32");
}

inline bool has_location_features(const fs::path& case_dir) {
  for (std::size_t f = 0; f < kLocationFeatureCount; ++f)
    if (!fs::exists(location_feature_path(case_dir, f))) return false;
  return true;
}

inline LocationFeatureSet load_location_features(const fs::path& case_dir, Dims dims, Spacing spacing) {
  LocationFeatureSet set;
  for (std::size_t f = 0; f < kLocationFeatureCount; ++f) {
    set[f].dims = dims;
    set[f].voxel_size = spacing;
    set[f].values = read_raw<float>(location_feature_path(case_dir, f), dims[0] * dims[1] * dims[2]);
  }
  return set;
}

inline void save_location_features(const fs::path& case_dir, const LocationFeatureSet& set) {
  fs::create_directories(case_dir / "location");
  for (std::size_t f = 0; f < kLocationFeatureCount; ++f) write_raw(location_feature_path(case_dir, f), set[f].values);
}

/// Reads meta.json plus the raw volumes; location/ features are loaded when all 8 exist.
inline CaseRecord load_case(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw std::runtime_error("missing file: " + meta_path.string());
  nlohmann::json meta;
  try {
    std::ifstream(meta_path) >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed " + meta_path.string() + ": " + e.what());
  }
  CaseRecord c;
  Dims dims{};
  Spacing spacing{};
  try {
    c.case_id = meta.at("case_id").get<std::string>();
    const auto d = meta.at("dims").get<std::vector<std::size_t>>();
    const auto s = meta.at("voxel_size_mm").get<std::vector<double>>();
    if (d.size() != 3 || s.size() != 3) throw std::runtime_error("dims and voxel_size_mm need 3 entries");
    std::copy(d.begin(), d.end(), dims.begin());
    std::copy(s.begin(), s.end(), spacing.begin());
  } catch (const std::exception& e) {
    throw std::runtime_error("malformed " + meta_path.string() + ": " + e.what());
  }
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw std::runtime_error(meta_path.string() + ": dims must be positive");
  const std::size_t n = dims[0] * dims[1] * dims[2];
  auto image = [&](const char* name) {
    ImageVolume v(dims, spacing);
    v.values = read_raw<float>(dir / name, n);
    return v;
  };
  auto mask = [&](const char* name) {
    MaskVolume v(dims, spacing);
    v.values = read_raw<std::uint8_t>(dir / name, n);
    return v;
  };
  c.flair = image("flair.f32");
  c.t1 = image("t1.f32");
  c.brain_mask = mask("brain_mask.u8");
  c.annotation = mask("annotation.u8");
  c.ventricle_left = mask("ventricle_left.u8");
  c.ventricle_right = mask("ventricle_right.u8");
  if (has_location_features(dir)) c.location_features = load_location_features(dir, dims, spacing);
  validate_case(c);
  return c;
}

inline void save_case(const fs::path& dir, const CaseRecord& c) {
  validate_case(c);
  fs::create_directories(dir);
  const nlohmann::json meta = {{"case_id", c.case_id},
                               {"dims", {c.flair.dims[0], c.flair.dims[1], c.flair.dims[2]}},
                               {"voxel_size_mm", {c.flair.voxel_size[0], c.flair.voxel_size[1], c.flair.voxel_size[2]}}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  write_raw(dir / "flair.f32", c.flair.values);
  write_raw(dir / "t1.f32", c.t1.values);
  write_raw(dir / "brain_mask.u8", c.brain_mask.values);
  write_raw(dir / "annotation.u8", c.annotation.values);
  write_raw(dir / "ventricle_left.u8", c.ventricle_left.values);
  write_raw(dir / "ventricle_right.u8", c.ventricle_right.values);
  if (c.location_features) save_location_features(dir, *c.location_features);
}

// ---------------------------------------------------------------- normalization

/// (v - min) / (max - min) with min/max taken over mask voxels; results clamped to [0,1].
/// A constant masked volume maps every voxel to 0.
inline ImageVolume normalize_intensities(const ImageVolume& v, const MaskVolume& mask) {
  check_same_grid(mask, v.dims, "normalize_intensities mask");
  float lo = 0.0f, hi = 0.0f;
  bool any = false;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask[i]) continue;
    if (!any) {
      lo = hi = v[i];
      any = true;
    }
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  if (!any) throw std::invalid_argument("normalize_intensities: mask is empty");
  ImageVolume out(v.dims, v.voxel_size);
  if (hi == lo) return out;
  const double range = static_cast<double>(hi) - lo;
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(std::clamp((static_cast<double>(v[i]) - lo) / range, 0.0, 1.0));
  return out;
}

// ---------------------------------------------------------------- cohort manifest

enum class Split { train, validation, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train|validation|test)");
}

struct ManifestEntry {
  std::string path;  // case directory, relative to the manifest's directory unless absolute
  Split split = Split::train;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

using CohortManifest = std::vector<ManifestEntry>;

inline void write_manifest(const fs::path& file, const CohortManifest& m) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : m) j.push_back({{"path", e.path}, {"split", to_string(e.split)}});
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream(file) << j.dump(2) << '\n';
}

inline CohortManifest read_manifest(const fs::path& file) {
  if (!fs::exists(file)) throw std::runtime_error("missing file: " + file.string());
  nlohmann::json j;
  std::ifstream(file) >> j;
  if (!j.is_array()) throw std::runtime_error(file.string() + ": manifest must be a JSON array");
  CohortManifest m;
  for (const auto& e : j) m.push_back({e.at("path").get<std::string>(), parse_split(e.at("split").get<std::string>())});
  return m;
}

inline fs::path resolve_case_path(const fs::path& manifest_file, const ManifestEntry& e) {
  const fs::path p(e.path);
  return p.is_absolute() ? p : manifest_file.parent_path() / p;
}

/// Loads every case of the manifest (optionally one split) and checks id uniqueness.
inline std::vector<CaseRecord> load_cohort(const fs::path& manifest_file, std::optional<Split> split = std::nullopt) {
  const auto manifest = read_manifest(manifest_file);
  std::vector<CaseRecord> cases;
  std::set<std::string> ids;
  for (const auto& e : manifest) {
    if (split && e.split != *split) continue;
    cases.push_back(load_case(resolve_case_path(manifest_file, e)));
    if (!ids.insert(cases.back().case_id).second)
      throw std::runtime_error("manifest: duplicate case_id " + cases.back().case_id);
  }
  return cases;
}

/// Seeded split assignment. Counts are floor(fraction * n) with the remainder handed out
/// by largest fractional part (ties to the earlier split).
inline CohortManifest split_cohort(CohortManifest manifest, const std::array<double, 3>& fractions, std::uint64_t seed) {
  if (manifest.empty()) throw std::invalid_argument("split_cohort: empty cohort");
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split_cohort: fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_cohort: fractions must sum to 1");
  const std::size_t n = manifest.size();
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(n);
    counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (rem[s] > rem[best]) best = s;
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(seed, Purpose::split);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t k = 0;
  for (int s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < counts[s]; ++c) manifest[order[k++]].split = static_cast<Split>(s);
  return manifest;
}

}  // namespace locseg

#endif  // LOCSEG_VOLUME_HPP
