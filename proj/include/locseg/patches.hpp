#ifndef LOCSEG_PATCHES_HPP
#define LOCSEG_PATCHES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "locseg/engine/rng.hpp"
#include "locseg/network.hpp"
#include "locseg/volume.hpp"

namespace locseg {

/// Values per sample: 3 scales x 2 channels x 32 x 32, scale-major.
inline constexpr std::size_t kPatchValues = kScaleCount * kChannelsPerScale * kPatchSize * kPatchSize;
inline constexpr std::size_t kScalePatchValues = kChannelsPerScale * kPatchSize * kPatchSize;

/// Case with intensities normalized inside the brain mask; what the sampler and
/// the sliding window read.
struct PreparedCase {
  std::string case_id;
  std::array<ImageVolume, kChannelsPerScale> channels;  // FLAIR, T1 in [0,1]
  MaskVolume brain_mask;
  MaskVolume annotation;
  std::optional<LocationFeatureSet> location;

  Dims dims() const { return brain_mask.dims; }
};

inline PreparedCase prepare_case(const CaseRecord& c) {
  validate_case(c);
  PreparedCase p;
  p.case_id = c.case_id;
  p.channels[0] = normalize_intensities(c.flair, c.brain_mask);
  p.channels[1] = normalize_intensities(c.t1, c.brain_mask);
  p.brain_mask = c.brain_mask;
  p.annotation = c.annotation;
  p.location = c.location_features;
  return p;
}

/// Mean of the f-by-f block of slice z whose top-left corner is (x0, y0); voxels outside the
/// image count as zero. Patch extraction and the sliding window both go through here.
inline float block_mean(const ImageVolume& v, std::ptrdiff_t x0, std::ptrdiff_t y0, std::size_t z, std::size_t f) {
  const auto nx = static_cast<std::ptrdiff_t>(v.dims[0]), ny = static_cast<std::ptrdiff_t>(v.dims[1]);
  if (f == 1) return x0 >= 0 && y0 >= 0 && x0 < nx && y0 < ny ? v(x0, y0, z) : 0.0f;
  float sum = 0.0f;
  for (std::size_t i = 0; i < f; ++i) {
    const std::ptrdiff_t y = y0 + static_cast<std::ptrdiff_t>(i);
    if (y < 0 || y >= ny) continue;
    for (std::size_t j = 0; j < f; ++j) {
      const std::ptrdiff_t x = x0 + static_cast<std::ptrdiff_t>(j);
      if (x >= 0 && x < nx) sum += v(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z);
    }
  }
  return sum / static_cast<float>(f * f);
}

/// One scale of the patch around (x, y, z): S x S region from (x - S/2, y - S/2) mean-pooled
/// to 32 x 32, both channels. out receives 2*32*32 values.
inline void extract_scale_patch(const PreparedCase& c, std::size_t x, std::size_t y, std::size_t z, std::size_t scale,
                                float* out) {
  if (scale % kPatchSize != 0) throw std::invalid_argument("patch scale must be a multiple of 32");
  const std::size_t f = scale / kPatchSize;
  const auto half = static_cast<std::ptrdiff_t>(scale / 2);
  for (std::size_t ch = 0; ch < kChannelsPerScale; ++ch)
    for (std::size_t py = 0; py < kPatchSize; ++py)
      for (std::size_t px = 0; px < kPatchSize; ++px) {
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(x) - half + static_cast<std::ptrdiff_t>(px * f);
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(y) - half + static_cast<std::ptrdiff_t>(py * f);
        *out++ = block_mean(c.channels[ch], x0, y0, z, f);
      }
}

inline void check_patch_center(const PreparedCase& c, std::size_t x, std::size_t y, std::size_t z) {
  const auto d = c.dims();
  if (x >= d[0] || y >= d[1] || z >= d[2]) {
    throw std::out_of_range(c.case_id + ": patch center (" + std::to_string(x) + "," + std::to_string(y) + "," +
                            std::to_string(z) + ") outside the volume");
  }
  if (!c.brain_mask(x, y, z)) {
    throw std::invalid_argument(c.case_id + ": patch center (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                std::to_string(z) + ") is outside the brain mask");
  }
}

/// All three scales (kPatchValues floats) plus the 8 location values at the voxel
/// (zeros when the case carries no location features).
inline void extract_multiscale_patch(const PreparedCase& c, std::size_t x, std::size_t y, std::size_t z, float* patches,
                                     float* location) {
  check_patch_center(c, x, y, z);
  for (std::size_t s = 0; s < kScaleCount; ++s) extract_scale_patch(c, x, y, z, kScales[s], patches + s * kScalePatchValues);
  const std::size_t i = c.brain_mask.index(x, y, z);
  for (std::size_t f = 0; f < kLocationFeatures; ++f) location[f] = c.location ? (*c.location)[f][i] : 0.0f;
}

// ---------------------------------------------------------------- sample sets

/// Flat sample storage: patches [N x kPatchValues], location [N x 8], labels, provenance.
struct SampleSet {
  std::vector<std::string> case_ids;
  std::vector<float> patches;
  std::vector<float> location;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint32_t> case_index;
  std::vector<std::uint64_t> voxel;

  std::size_t size() const { return labels.size(); }
  const float* patch(std::size_t i) const { return patches.data() + i * kPatchValues; }
  const float* location_of(std::size_t i) const { return location.data() + i * kLocationFeatures; }
  std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }

  void reserve(std::size_t n) {
    patches.reserve(n * kPatchValues);
    location.reserve(n * kLocationFeatures);
    labels.reserve(n);
    case_index.reserve(n);
    voxel.reserve(n);
  }

  void add(const PreparedCase& c, std::uint32_t case_idx, std::size_t voxel_index) {
    const auto xyz = c.brain_mask.coords(voxel_index);
    const std::size_t n = size();
    patches.resize((n + 1) * kPatchValues);
    location.resize((n + 1) * kLocationFeatures);
    extract_multiscale_patch(c, xyz[0], xyz[1], xyz[2], patches.data() + n * kPatchValues,
                             location.data() + n * kLocationFeatures);
    labels.push_back(c.annotation[voxel_index]);
    case_index.push_back(case_idx);
    voxel.push_back(voxel_index);
  }

  friend bool operator==(const SampleSet&, const SampleSet&) = default;
};

struct VoxelRef {
  std::uint32_t case_index;
  std::uint64_t voxel;
  auto operator<=>(const VoxelRef&) const = default;
};

/// k distinct picks from n via a partial Fisher-Yates shuffle; returned sorted.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, CounterRng rng) {
  if (k > n) throw std::invalid_argument("cannot draw " + std::to_string(k) + " of " + std::to_string(n) + " without replacement");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Balanced set from the given cases: a seeded half (rounded up) of all annotated voxels and
/// as many label-0 brain voxels drawn uniformly without replacement. Candidates are ordered
/// by (case_id, voxel index) before drawing; samples are stored positives first, in that order.
inline SampleSet build_balanced_dataset(const std::vector<const PreparedCase*>& cases, std::uint64_t seed) {
  if (cases.empty()) throw std::invalid_argument("build_balanced_dataset: no cases");
  std::vector<std::uint32_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return cases[a]->case_id < cases[b]->case_id; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (cases[order[i]]->case_id == cases[order[i - 1]]->case_id)
      throw std::invalid_argument("build_balanced_dataset: duplicate case_id " + cases[order[i]]->case_id);

  SampleSet set;
  std::vector<VoxelRef> positives, negatives;
  for (std::uint32_t k = 0; k < order.size(); ++k) {
    const PreparedCase& c = *cases[order[k]];
    set.case_ids.push_back(c.case_id);
    for (std::size_t i = 0; i < c.brain_mask.size(); ++i) {
      if (!c.brain_mask[i]) continue;
      (c.annotation[i] ? positives : negatives).push_back({k, i});
    }
  }
  if (positives.empty()) throw std::invalid_argument("build_balanced_dataset: no annotated voxels in the selected cases");
  const std::size_t k = (positives.size() + 1) / 2;
  if (negatives.size() < k) {
    throw std::invalid_argument("build_balanced_dataset: only " + std::to_string(negatives.size()) +
                                " background voxels for " + std::to_string(k) + " positives");
  }
  const auto pos = sample_without_replacement(positives.size(), k, CounterRng(seed, Purpose::positive_sampling));
  const auto neg = sample_without_replacement(negatives.size(), k, CounterRng(seed, Purpose::negative_sampling));
  set.reserve(2 * k);
  for (auto i : pos) set.add(*cases[order[positives[i].case_index]], positives[i].case_index, positives[i].voxel);
  for (auto i : neg) set.add(*cases[order[negatives[i].case_index]], negatives[i].case_index, negatives[i].voxel);
  return set;
}

inline SampleSet build_balanced_dataset(const std::vector<PreparedCase>& cases, std::uint64_t seed) {
  std::vector<const PreparedCase*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  return build_balanced_dataset(ptrs, seed);
}

/// Seeded permutation of [0, n) cut into batches; the last batch keeps the remainder.
inline std::vector<std::vector<std::size_t>> shuffle_minibatches(std::size_t n, std::size_t batch_size,
                                                                  std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(seed, Purpose::shuffle, epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size)
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  return batches;
}

/// Empty network input with room for B samples, shaped for the spec's fusion mode.
inline NetworkInput<float> allocate_input(const NetworkSpec& spec, std::size_t B) {
  NetworkInput<float> in;
  in.batch = B;
  in.location = Tensor<float>(Shape{B, kLocationFeatures});
  for (std::size_t s = 0; s < spec.streams(); ++s) in.streams.emplace_back(Shape{B, spec.input_channels(), kPatchSize, kPatchSize});
  return in;
}

/// Copies one sample (kPatchValues patch floats, 8 location values) into slot b.
inline void set_input_sample(const NetworkSpec& spec, const float* patch, const float* location, std::size_t b,
                             NetworkInput<float>& in) {
  const std::size_t per_stream = spec.input_channels() * kPatchSize * kPatchSize;
  switch (spec.fusion) {
    case FusionMode::ss:
      std::memcpy(in.streams[0].data() + b * per_stream, patch, per_stream * sizeof(float));
      break;
    case FusionMode::msef:  // channels are scale-major, so the stored layout already matches
      std::memcpy(in.streams[0].data() + b * per_stream, patch, kPatchValues * sizeof(float));
      break;
    case FusionMode::msiw:
    case FusionMode::msws:
      for (std::size_t s = 0; s < kScaleCount; ++s)
        std::memcpy(in.streams[s].data() + b * per_stream, patch + s * kScalePatchValues, per_stream * sizeof(float));
      break;
  }
  std::memcpy(in.location.data() + b * kLocationFeatures, location, kLocationFeatures * sizeof(float));
}

/// Network input for the listed samples, laid out for the spec's fusion mode.
inline NetworkInput<float> make_batch(const SampleSet& set, std::span<const std::size_t> indices, const NetworkSpec& spec) {
  auto in = allocate_input(spec, indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= set.size()) throw std::out_of_range("make_batch: sample index out of range");
    set_input_sample(spec, set.patch(i), set.location_of(i), b, in);
  }
  return in;
}

// ---------------------------------------------------------------- binary cache

inline constexpr char kSampleCacheMagic[4] = {'L', 'S', 'S', 'C'};
inline constexpr std::uint32_t kSampleCacheVersion = 1;

/// "LSSC", u32 version, u64 count, u32 scale count, u32 scales[], u32 case count and
/// (u32 length, bytes) case ids, then fixed-width records: f32 patches[kPatchValues],
/// f32 location[8], u8 label, u32 case index, u64 voxel index.
inline void save_sample_cache(const fs::path& path, const SampleSet& set) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write sample cache " + path.string());
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kSampleCacheMagic, 4);
  put(kSampleCacheVersion);
  put(static_cast<std::uint64_t>(set.size()));
  put(static_cast<std::uint32_t>(kScaleCount));
  for (auto s : kScales) put(static_cast<std::uint32_t>(s));
  put(static_cast<std::uint32_t>(set.case_ids.size()));
  for (const auto& id : set.case_ids) {
    put(static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.write(reinterpret_cast<const char*>(set.patch(i)), kPatchValues * sizeof(float));
    out.write(reinterpret_cast<const char*>(set.location_of(i)), kLocationFeatures * sizeof(float));
    put(set.labels[i]);
    put(set.case_index[i]);
    put(set.voxel[i]);
  }
  if (!out) throw std::runtime_error("failed writing sample cache " + path.string());
}

inline SampleSet load_sample_cache(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open sample cache " + path.string());
  auto get = [&](auto& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error(path.string() + ": truncated sample cache");
  };
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kSampleCacheMagic, 4) != 0) throw std::runtime_error(path.string() + ": not an LSSC cache");
  std::uint32_t version = 0, scales = 0, ids = 0;
  std::uint64_t count = 0;
  get(version);
  if (version != kSampleCacheVersion) throw std::runtime_error(path.string() + ": unsupported cache version " + std::to_string(version));
  get(count);
  get(scales);
  if (scales != kScaleCount) throw std::runtime_error(path.string() + ": cache scale count mismatch");
  for (auto s : kScales) {
    std::uint32_t v = 0;
    get(v);
    if (v != s) throw std::runtime_error(path.string() + ": cache scales mismatch");
  }
  SampleSet set;
  get(ids);
  for (std::uint32_t i = 0; i < ids; ++i) {
    std::uint32_t len = 0;
    get(len);
    std::string id(len, '\0');
    in.read(id.data(), len);
    set.case_ids.push_back(std::move(id));
  }
  set.patches.resize(count * kPatchValues);
  set.location.resize(count * kLocationFeatures);
  set.labels.resize(count);
  set.case_index.resize(count);
  set.voxel.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(set.patches.data() + i * kPatchValues), kPatchValues * sizeof(float));
    in.read(reinterpret_cast<char*>(set.location.data() + i * kLocationFeatures), kLocationFeatures * sizeof(float));
    get(set.labels[i]);
    get(set.case_index[i]);
    get(set.voxel[i]);
    if (set.case_index[i] >= ids) throw std::runtime_error(path.string() + ": record case index out of range");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing bytes in sample cache");
  return set;
}

}  // namespace locseg

#endif  // LOCSEG_PATCHES_HPP
