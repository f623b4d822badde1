#ifndef LOCSEG_INFERENCE_HPP
#define LOCSEG_INFERENCE_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "locseg/engine/layers.hpp"
#include "locseg/evaluation.hpp"
#include "locseg/network.hpp"
#include "locseg/patches.hpp"

namespace locseg {

struct SegmentOptions {
  std::size_t batch_size = 256;  // voxels per head evaluation
};

inline void check_segment_inputs(const Network<float>& net, const PreparedCase& c, const SegmentOptions& opt) {
  if (opt.batch_size == 0) throw std::invalid_argument("segment: batch size must be positive");
  if (net.spec().injection != InjectionPoint::none && !c.location) {
    throw std::invalid_argument(c.case_id + ": network injects location features (" + to_string(net.spec().injection) +
                                ") but the case has none; run the features step first");
  }
}

/// Probability of the lesion class at every brain voxel by running the patch network on
/// each voxel's extracted patch. Reference path; also the route for MSEF.
inline ImageVolume segment_per_patch(const Network<float>& net, const PreparedCase& c, const SegmentOptions& opt = {}) {
  check_segment_inputs(net, c, opt);
  const auto& spec = net.spec();
  ImageVolume prob(c.dims(), c.brain_mask.voxel_size);
  std::vector<std::size_t> voxels;
  for (std::size_t i = 0; i < c.brain_mask.size(); ++i)
    if (c.brain_mask[i]) voxels.push_back(i);
  std::vector<float> patch(kPatchValues), loc(kLocationFeatures);
  for (std::size_t start = 0; start < voxels.size(); start += opt.batch_size) {
    const std::size_t B = std::min(opt.batch_size, voxels.size() - start);
    auto in = allocate_input(spec, B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto xyz = c.brain_mask.coords(voxels[start + b]);
      extract_multiscale_patch(c, xyz[0], xyz[1], xyz[2], patch.data(), loc.data());
      set_input_sample(spec, patch.data(), loc.data(), b, in);
    }
    const auto p = net.predict(in);
    for (std::size_t b = 0; b < B; ++b) prob[voxels[start + b]] = p[b][1];
  }
  return prob;
}

namespace inference_detail {

// Dense conv-stack output for one stream and one sampling phase of a slice.
// Voxel (x, y) with x = r + f*u, y = t + f*v reads its features from the window whose
// top-left corner is (u - u0, v - v0) in `map` (channels x height x width).
struct PhaseMap {
  std::ptrdiff_t u0 = 0, v0 = 0;
  std::size_t height = 0, width = 0;
  std::vector<float> map;
};

inline std::ptrdiff_t first_in_phase(std::ptrdiff_t lo, std::size_t f, std::size_t r) {
  const auto F = static_cast<std::ptrdiff_t>(f);
  return lo + ((static_cast<std::ptrdiff_t>(r) - lo % F) % F + F) % F;
}

}  // namespace inference_detail

/// Sliding-window segmentation that evaluates each conv stream densely over the slice and
/// reuses the maps across neighbouring voxels. Scale S is handled as (S/32)^2 pooled phase
/// images, one per residue of (x, y) mod S/32, so every voxel's conv features are computed
/// from exactly the values its extracted patch would hold. The head runs on batches of
/// voxels. Output equals segment_per_patch bit for bit; MSEF (whose conv input mixes three
/// strides) goes through the per-patch path.
inline ImageVolume segment_sliding_window(const Network<float>& net, const PreparedCase& c, const SegmentOptions& opt = {}) {
  using namespace inference_detail;
  const auto& spec = net.spec();
  if (spec.fusion == FusionMode::msef) return segment_per_patch(net, c, opt);
  check_segment_inputs(net, c, opt);
  const auto [nx, ny, nz] = c.dims();
  ImageVolume prob(c.dims(), c.brain_mask.voxel_size);
  const std::size_t S = spec.streams(), E = spec.feature_extent(), F = spec.flatten_length();
  const std::size_t filters = spec.conv_stack.back().filters, shrink = kPatchSize - E;
  std::vector<std::vector<float>> acts;

  for (std::size_t z = 0; z < nz; ++z) {
    std::vector<std::size_t> voxels;
    std::ptrdiff_t x_lo = static_cast<std::ptrdiff_t>(nx), x_hi = -1, y_lo = static_cast<std::ptrdiff_t>(ny), y_hi = -1;
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        if (!c.brain_mask(x, y, z)) continue;
        voxels.push_back(c.brain_mask.index(x, y, z));
        x_lo = std::min<std::ptrdiff_t>(x_lo, static_cast<std::ptrdiff_t>(x));
        x_hi = std::max<std::ptrdiff_t>(x_hi, static_cast<std::ptrdiff_t>(x));
        y_lo = std::min<std::ptrdiff_t>(y_lo, static_cast<std::ptrdiff_t>(y));
        y_hi = std::max<std::ptrdiff_t>(y_hi, static_cast<std::ptrdiff_t>(y));
      }
    if (voxels.empty()) continue;

    // maps[s][r * f + t]
    std::vector<std::vector<PhaseMap>> maps(S);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t scale = spec.late_fusion() ? kScales[s] : kPatchSize;
      const std::size_t f = scale / kPatchSize;
      const auto half = static_cast<std::ptrdiff_t>(scale / 2);
      const auto fi = static_cast<std::ptrdiff_t>(f);
      maps[s].resize(f * f);
      for (std::size_t r = 0; r < f; ++r)
        for (std::size_t t = 0; t < f; ++t) {
          const std::ptrdiff_t xs = first_in_phase(x_lo, f, r), ys = first_in_phase(y_lo, f, t);
          if (xs > x_hi || ys > y_hi) continue;
          const std::ptrdiff_t ri = static_cast<std::ptrdiff_t>(r), ti = static_cast<std::ptrdiff_t>(t);
          PhaseMap& pm = maps[s][r * f + t];
          pm.u0 = (xs - ri) / fi;
          pm.v0 = (ys - ti) / fi;
          const std::size_t cols = static_cast<std::size_t>((x_hi - ri) / fi - pm.u0 + 1);
          const std::size_t rows = static_cast<std::size_t>((y_hi - ti) / fi - pm.v0 + 1);
          const std::size_t W = cols + kPatchSize - 1, H = rows + kPatchSize - 1;
          std::vector<float> image(kChannelsPerScale * H * W);
          for (std::size_t ch = 0; ch < kChannelsPerScale; ++ch)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                const std::ptrdiff_t x0 = ri + (pm.u0 + static_cast<std::ptrdiff_t>(j)) * fi - half;
                const std::ptrdiff_t y0 = ti + (pm.v0 + static_cast<std::ptrdiff_t>(i)) * fi - half;
                image[(ch * H + i) * W + j] = block_mean(c.channels[ch], x0, y0, z, f);
              }
          pm.map = net.stream_forward(s, image.data(), H, W, acts);
          pm.height = H - shrink;
          pm.width = W - shrink;
        }
    }

    std::vector<std::vector<float>> feats(S);
    std::vector<float> loc_t;
    for (std::size_t start = 0; start < voxels.size(); start += opt.batch_size) {
      const std::size_t B = std::min(opt.batch_size, voxels.size() - start);
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t scale = spec.late_fusion() ? kScales[s] : kPatchSize;
        const std::size_t f = scale / kPatchSize;
        feats[s].resize(F * B);
        for (std::size_t b = 0; b < B; ++b) {
          const auto xyz = c.brain_mask.coords(voxels[start + b]);
          const PhaseMap& pm = maps[s][(xyz[0] % f) * f + xyz[1] % f];
          const std::size_t u = xyz[0] / f - static_cast<std::size_t>(pm.u0);
          const std::size_t v = xyz[1] / f - static_cast<std::size_t>(pm.v0);
          float* dst = feats[s].data() + b;
          for (std::size_t ch = 0; ch < filters; ++ch)
            for (std::size_t i = 0; i < E; ++i) {
              const float* src = pm.map.data() + (ch * pm.height + v + i) * pm.width + u;
              for (std::size_t j = 0; j < E; ++j, dst += B) *dst = src[j];
            }
        }
      }
      loc_t.assign(kLocationFeatures * B, 0.0f);
      if (c.location)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < kLocationFeatures; ++k) loc_t[k * B + b] = (*c.location)[k][voxels[start + b]];
      std::vector<const float*> ptrs(S);
      for (std::size_t s = 0; s < S; ++s) ptrs[s] = feats[s].data();
      const auto logits = net.head_forward(ptrs, loc_t.data(), B);
      for (std::size_t b = 0; b < B; ++b) prob[voxels[start + b]] = softmax2(logits[b], logits[B + b])[1];
    }
  }
  return prob;
}

// ---------------------------------------------------------------- fully convolutional form

/// The SS-family network with its fully connected layers recast as convolutions: the first as
/// an E x E kernel over the last conv map, the rest as 1 x 1. An H x W input yields
/// (H-31) x (W-31) outputs; output (i, j) is the prediction for the 32 x 32 window at (i, j).
class DenseNetwork {
 public:
  explicit DenseNetwork(const Network<float>& net) : net_(net) {
    const auto& spec = net.spec();
    if (spec.fusion != FusionMode::ss) {
      throw std::invalid_argument("convert_to_fully_convolutional: only the single-scale family is supported (got " +
                                  to_string(spec.fusion) + ")");
    }
    const auto& fc = net.fc_layer(0);
    const std::size_t F = spec.flatten_length();
    const auto& w = net.parameters()[fc.weight].value;
    fc1_.resize(fc.units * F);
    for (std::size_t o = 0; o < fc.units; ++o) std::copy_n(w.data() + o * fc.inputs, F, fc1_.data() + o * F);
    if (fc.location) {
      fc1_loc_.resize(fc.units * kLocationFeatures);
      for (std::size_t o = 0; o < fc.units; ++o)
        std::copy_n(w.data() + o * fc.inputs + F, kLocationFeatures, fc1_loc_.data() + o * kLocationFeatures);
    }
  }

  const NetworkSpec& spec() const { return net_.spec(); }

  /// image is [C, H, W]; location, when the network injects it, is [8, H-31, W-31] aligned with
  /// the outputs. Returns lesion probabilities [(H-31) x (W-31)].
  std::vector<float> forward(const float* image, std::size_t height, std::size_t width, const float* location) const {
    const auto& spec = net_.spec();
    if (height < kPatchSize || width < kPatchSize) throw std::invalid_argument("dense network: input smaller than 32x32");
    if (spec.injection != InjectionPoint::none && !location)
      throw std::invalid_argument("dense network: location maps required by injection point");
    const std::size_t E = spec.feature_extent();
    const auto& last = net_.stream_forward(0, image, height, width, acts_);
    const std::size_t he = height - (kPatchSize - E), we = width - (kPatchSize - E);
    const ConvGeometry g{spec.conv_stack.back().filters, he, we, spec.fc_widths[0], E};
    const std::size_t P = g.positions();
    const T alpha = static_cast<T>(spec.alpha);
    std::vector<std::vector<float>> x(net_.fc_instances());
    const auto& fc0 = net_.fc_layer(0);
    x[0].resize(fc0.units * P);
    conv2d_forward_raw(last.data(), g, fc1_.data(), net_.parameters()[fc0.bias].value.data(), x[0].data());
    if (fc0.location) {
      std::vector<float> scaled(kLocationFeatures * P);
      for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = alpha * location[i];
      gemm<float>(fc0.units, P, kLocationFeatures, fc1_loc_.data(), kLocationFeatures, 1, scaled.data(), P, x[0].data(), P,
                  true);
    }
    relu_inplace(x[0].data(), x[0].size());
    for (std::size_t i = 1; i < net_.fc_instances(); ++i) {
      const auto& f = net_.fc_layer(i);
      const std::size_t prev = net_.fc_layer(i - 1).units;
      std::vector<float> in(f.inputs * P);
      std::copy(x[i - 1].begin(), x[i - 1].end(), in.begin());
      if (f.location)
        for (std::size_t r = 0; r < kLocationFeatures * P; ++r) in[prev * P + r] = alpha * location[r];
      x[i].resize(f.units * P);
      fc_forward_batch(in.data(), f.inputs, P, net_.parameters()[f.weight].value.data(),
                       net_.parameters()[f.bias].value.data(), f.units, x[i].data());
      if (i + 1 < net_.fc_instances()) relu_inplace(x[i].data(), x[i].size());
    }
    const auto& logits = x.back();
    std::vector<float> prob(P);
    for (std::size_t p = 0; p < P; ++p) prob[p] = softmax2(logits[p], logits[P + p])[1];
    return prob;
  }

 private:
  using T = float;
  Network<float> net_;
  std::vector<float> fc1_, fc1_loc_;
  mutable std::vector<std::vector<float>> acts_;
};

inline DenseNetwork convert_to_fully_convolutional(const Network<float>& net) { return DenseNetwork(net); }

/// Whole-case segmentation with the dense network: each slice is zero-padded by 16 before
/// and 15 after, cropped to the brain bounding box and processed in bands of output rows.
inline ImageVolume segment_dense(const DenseNetwork& dense, const PreparedCase& c, std::size_t band_rows = 8) {
  const auto& spec = dense.spec();
  if (spec.injection != InjectionPoint::none && !c.location)
    throw std::invalid_argument(c.case_id + ": network injects location features but the case has none");
  const auto [nx, ny, nz] = c.dims();
  ImageVolume prob(c.dims(), c.brain_mask.voxel_size);
  const std::ptrdiff_t half = kPatchSize / 2;
  for (std::size_t z = 0; z < nz; ++z) {
    std::size_t x_lo = nx, x_hi = 0, y_lo = ny, y_hi = 0;
    bool any = false;
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x)
        if (c.brain_mask(x, y, z)) {
          any = true;
          x_lo = std::min(x_lo, x);
          x_hi = std::max(x_hi, x);
          y_lo = std::min(y_lo, y);
          y_hi = std::max(y_hi, y);
        }
    if (!any) continue;
    const std::size_t cols = x_hi - x_lo + 1, W = cols + kPatchSize - 1;
    for (std::size_t y0 = y_lo; y0 <= y_hi; y0 += band_rows) {
      const std::size_t rows = std::min(band_rows, y_hi - y0 + 1), H = rows + kPatchSize - 1;
      std::vector<float> image(kChannelsPerScale * H * W);
      for (std::size_t ch = 0; ch < kChannelsPerScale; ++ch)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            image[(ch * H + i) * W + j] = block_mean(c.channels[ch], static_cast<std::ptrdiff_t>(x_lo + j) - half,
                                                     static_cast<std::ptrdiff_t>(y0 + i) - half, z, 1);
      std::vector<float> loc(kLocationFeatures * rows * cols, 0.0f);
      if (c.location)
        for (std::size_t k = 0; k < kLocationFeatures; ++k)
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) loc[(k * rows + i) * cols + j] = (*c.location)[k](x_lo + j, y0 + i, z);
      const auto p = dense.forward(image.data(), H, W, loc.data());
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          if (c.brain_mask(x_lo + j, y0 + i, z)) prob(x_lo + j, y0 + i, z) = p[i * cols + j];
    }
  }
  return prob;
}

// ---------------------------------------------------------------- outputs

inline void write_segmentation(const fs::path& dir, const ImageVolume& prob, double threshold) {
  fs::create_directories(dir);
  write_raw(dir / "prob.f32", prob.values);
  write_raw(dir / "segmentation.u8", apply_threshold(prob, threshold).values);
}

inline ImageVolume read_probability(const fs::path& dir, Dims dims, Spacing spacing) {
  ImageVolume v(dims, spacing);
  v.values = read_raw<float>(dir / "prob.f32", dims[0] * dims[1] * dims[2]);
  return v;
}

}  // namespace locseg

#endif  // LOCSEG_INFERENCE_HPP
