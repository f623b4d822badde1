#ifndef LOCSEG_NETWORK_HPP
#define LOCSEG_NETWORK_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "locseg/engine/conv.hpp"
#include "locseg/engine/layers.hpp"
#include "locseg/engine/parameter_store.hpp"
#include "locseg/engine/rng.hpp"
#include "locseg/engine/tensor.hpp"

namespace locseg {

inline constexpr std::size_t kPatchSize = 32;
inline constexpr std::size_t kScaleCount = 3;
inline constexpr std::array<std::size_t, kScaleCount> kScales = {32, 64, 128};
inline constexpr std::size_t kChannelsPerScale = 2;  // FLAIR, T1
inline constexpr std::size_t kLocationFeatures = 8;

enum class FusionMode { ss, msef, msiw, msws };
enum class InjectionPoint { none, lcl, ffcl, sfcl };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::ss: return "ss";
    case FusionMode::msef: return "msef";
    case FusionMode::msiw: return "msiw";
    case FusionMode::msws: return "msws";
  }
  return "?";
}

inline std::string to_string(InjectionPoint p) {
  switch (p) {
    case InjectionPoint::none: return "none";
    case InjectionPoint::lcl: return "lcl";
    case InjectionPoint::ffcl: return "ffcl";
    case InjectionPoint::sfcl: return "sfcl";
  }
  return "?";
}

inline FusionMode parse_fusion(const std::string& s) {
  if (s == "ss") return FusionMode::ss;
  if (s == "msef") return FusionMode::msef;
  if (s == "msiw") return FusionMode::msiw;
  if (s == "msws") return FusionMode::msws;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected ss|msef|msiw|msws)");
}

inline InjectionPoint parse_injection(const std::string& s) {
  if (s == "none") return InjectionPoint::none;
  if (s == "lcl") return InjectionPoint::lcl;
  if (s == "ffcl") return InjectionPoint::ffcl;
  if (s == "sfcl") return InjectionPoint::sfcl;
  throw std::invalid_argument("unknown injection point '" + s + "' (expected none|lcl|ffcl|sfcl)");
}

struct ConvLayerSpec {
  std::size_t filters = 0;
  std::size_t kernel = 0;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct NetworkSpec {
  FusionMode fusion = FusionMode::ss;
  InjectionPoint injection = InjectionPoint::none;
  double alpha = 1.0;
  std::vector<ConvLayerSpec> conv_stack = {{20, 7}, {40, 5}, {80, 3}, {110, 3}};
  std::vector<std::size_t> fc_widths = {300, 200, 2};
  double dropout = 0.3;

  bool multi_scale() const { return fusion != FusionMode::ss; }
  bool late_fusion() const { return fusion == FusionMode::msiw || fusion == FusionMode::msws; }
  std::vector<std::size_t> scales() const {
    return multi_scale() ? std::vector<std::size_t>(kScales.begin(), kScales.end()) : std::vector<std::size_t>{32};
  }
  /// Conv streams evaluated per sample.
  std::size_t streams() const { return late_fusion() ? kScaleCount : 1; }
  /// Distinct conv parameter sets.
  std::size_t conv_parameter_sets() const { return fusion == FusionMode::msiw ? kScaleCount : 1; }
  std::size_t input_channels() const {
    return fusion == FusionMode::msef ? kScaleCount * kChannelsPerScale : kChannelsPerScale;
  }
  std::size_t feature_extent() const {
    std::size_t e = kPatchSize;
    for (const auto& l : conv_stack) e = e - l.kernel + 1;
    return e;
  }
  std::size_t flatten_length() const {
    const std::size_t e = feature_extent();
    return conv_stack.back().filters * e * e;
  }
  /// Index of the fully connected layer whose input is widened by the location vector.
  /// 0 is the (per-stream) first FC layer; joint layers follow.
  std::optional<std::size_t> injected_fc_layer() const {
    switch (injection) {
      case InjectionPoint::none: return std::nullopt;
      case InjectionPoint::lcl: return 0;
      case InjectionPoint::ffcl: return 1;
      case InjectionPoint::sfcl: return 2;
    }
    return std::nullopt;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline void validate(const NetworkSpec& spec) {
  if (spec.conv_stack.empty()) throw std::invalid_argument("network spec: conv stack is empty");
  std::size_t extent = kPatchSize;
  for (const auto& l : spec.conv_stack) {
    if (l.filters == 0 || l.kernel == 0) throw std::invalid_argument("network spec: conv layer with zero extent");
    if (l.kernel > extent) throw std::invalid_argument("network spec: conv stack shrinks the 32x32 patch below 1x1");
    extent = extent - l.kernel + 1;
  }
  if (spec.fc_widths.empty() || spec.fc_widths.back() != 2) {
    throw std::invalid_argument("network spec: last fully connected layer must have 2 units");
  }
  for (auto w : spec.fc_widths)
    if (w == 0) throw std::invalid_argument("network spec: fully connected layer with zero width");
  if (spec.late_fusion() && spec.fc_widths.size() < 2) {
    throw std::invalid_argument("network spec: late fusion needs a per-scale and a joint fully connected layer");
  }
  check_drop_probability(spec.dropout);
  if (spec.injection != InjectionPoint::none) {
    if (!(spec.alpha > 0.0)) throw std::invalid_argument("network spec: alpha must be positive when injecting");
    if (spec.injection == InjectionPoint::lcl && spec.late_fusion()) {
      throw std::invalid_argument("network spec: LCL injection is not defined for " + to_string(spec.fusion) +
                                  " (per-scale streams have no single last convolutional layer)");
    }
    if (*spec.injected_fc_layer() >= spec.fc_widths.size()) {
      throw std::invalid_argument("network spec: injection point " + to_string(spec.injection) +
                                  " needs more fully connected layers");
    }
  }
}

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& l : spec.conv_stack) conv.push_back({l.filters, l.kernel});
  return {{"fusion", to_string(spec.fusion)},
          {"injection", to_string(spec.injection)},
          {"alpha", spec.alpha},
          {"conv_stack", conv},
          {"fc_widths", spec.fc_widths},
          {"dropout", spec.dropout},
          {"scales", spec.scales()}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.fusion = parse_fusion(j.at("fusion").get<std::string>());
  spec.injection = parse_injection(j.at("injection").get<std::string>());
  spec.alpha = j.at("alpha").get<double>();
  spec.conv_stack.clear();
  for (const auto& l : j.at("conv_stack")) spec.conv_stack.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>()});
  spec.fc_widths = j.at("fc_widths").get<std::vector<std::size_t>>();
  spec.dropout = j.at("dropout").get<double>();
  if (j.contains("scales") && j.at("scales").get<std::vector<std::size_t>>() != spec.scales()) {
    throw std::invalid_argument("network spec: scales do not match fusion mode " + to_string(spec.fusion));
  }
  validate(spec);
  return spec;
}

// ---------------------------------------------------------------- parameter counting

struct LayerCount {
  std::string name;
  std::size_t count = 0;
};

struct ParameterCount {
  std::vector<LayerCount> layers;
  std::size_t conv = 0;
  std::size_t fully_connected = 0;
  std::size_t total = 0;
};

inline ParameterCount parameter_count(const NetworkSpec& spec) {
  validate(spec);
  ParameterCount pc;
  for (std::size_t set = 0; set < spec.conv_parameter_sets(); ++set) {
    std::size_t in = spec.input_channels();
    for (std::size_t l = 0; l < spec.conv_stack.size(); ++l) {
      const auto& c = spec.conv_stack[l];
      const std::size_t n = c.filters * (in * c.kernel * c.kernel) + c.filters;
      pc.layers.push_back({"conv" + std::to_string(l + 1) + (spec.conv_parameter_sets() > 1 ? ".s" + std::to_string(set) : ""), n});
      pc.conv += n;
      in = c.filters;
    }
  }
  const std::size_t loc = kLocationFeatures;
  const auto inj = spec.injected_fc_layer();
  for (std::size_t s = 0; s < spec.streams(); ++s) {
    const std::size_t in = spec.flatten_length() + (inj == 0u ? loc : 0);
    const std::size_t n = spec.fc_widths[0] * in + spec.fc_widths[0];
    pc.layers.push_back({"fc1" + (spec.streams() > 1 ? ".s" + std::to_string(s) : std::string()), n});
    pc.fully_connected += n;
  }
  std::size_t in = spec.streams() * spec.fc_widths[0];
  for (std::size_t l = 1; l < spec.fc_widths.size(); ++l) {
    const std::size_t width = in + (inj == l ? loc : 0);
    const std::size_t n = spec.fc_widths[l] * width + spec.fc_widths[l];
    pc.layers.push_back({"fc" + std::to_string(l + 1), n});
    pc.fully_connected += n;
    in = spec.fc_widths[l];
  }
  pc.total = pc.conv + pc.fully_connected;
  return pc;
}

// ---------------------------------------------------------------- inputs

/// A batch of network inputs. streams[s] is [B, C, 32, 32]; location is [B, 8] (unscaled).
template <typename T>
struct NetworkInput {
  std::size_t batch = 0;
  std::vector<Tensor<T>> streams;
  Tensor<T> location;
};

/// Dropout addressing for one training batch: masks are drawn from
/// (seed, dropout, sample_keys[b]) so they do not depend on batch composition.
struct DropoutKeys {
  std::uint64_t seed = 0;
  std::span<const std::uint64_t> sample_keys;
};

template <typename T>
using Probabilities = std::vector<std::array<T, 2>>;

// ---------------------------------------------------------------- network

template <typename T>
class Network {
 public:
  struct ConvParams {
    std::size_t weight = 0;
    std::size_t bias = 0;
    ConvGeometry geometry;  // for a 32x32 patch
  };
  struct FcParams {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t inputs = 0;  // including injected location columns
    std::size_t units = 0;
    bool location = false;   // last 8 input columns are alpha-scaled location features
  };

  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    build();
  }

  const NetworkSpec& spec() const { return spec_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  /// Overrides the location scale factor (zero allowed here, for analysis).
  void set_alpha(double alpha) {
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be non-negative");
    spec_.alpha = alpha;
  }

  /// Glorot-uniform weights, zero biases, zero optimizer state.
  void initialize(std::uint64_t seed) {
    CounterRng rng(seed, Purpose::glorot);
    for (std::size_t i = 0; i < store_.size(); ++i) {
      auto& p = store_[i];
      p.grad.fill(T{0});
      p.accumulator.fill(T{0});
      if (p.value.rank() == 1) {
        p.value.fill(T{0});
        continue;
      }
      std::size_t fan_in = 0, fan_out = 0;
      if (p.value.rank() == 4) {
        const std::size_t rf = p.value.dim(2) * p.value.dim(3);
        fan_in = p.value.dim(1) * rf;
        fan_out = p.value.dim(0) * rf;
      } else {
        fan_in = p.value.dim(1);
        fan_out = p.value.dim(0);
      }
      CounterRng stream = rng.substream(i);
      p.value = glorot_init<T>(p.value.shape(), fan_in, fan_out, stream);
    }
  }

  const std::vector<ConvParams>& conv_layers(std::size_t stream) const { return stream_convs_[stream]; }
  const FcParams& fc_layer(std::size_t instance) const { return fcs_[instance]; }
  /// FC instances: first streams() entries are per-stream first layers, then joint layers.
  std::size_t fc_instances() const { return fcs_.size(); }

  /// Validates per-stream input tensors for a batch.
  void check_input(const NetworkInput<T>& in) const {
    if (in.streams.size() != spec_.streams()) {
      throw std::invalid_argument("network input: expected " + std::to_string(spec_.streams()) + " stream(s), got " +
                                  std::to_string(in.streams.size()));
    }
    for (const auto& s : in.streams) {
      require_shape(s.shape(), {in.batch, spec_.input_channels(), kPatchSize, kPatchSize}, "network input patch");
    }
    require_shape(in.location.shape(), {in.batch, kLocationFeatures}, "network input location");
  }

  /// Conv stack of one stream on a single [C, H, W] image of any size >= 32x32.
  /// Writes every post-ReLU layer output into acts (acts[l] for layer l) and returns the last.
  const std::vector<T>& stream_forward(std::size_t stream, const T* image, std::size_t height, std::size_t width,
                                       std::vector<std::vector<T>>& acts) const {
    const auto& convs = stream_convs_[stream];
    acts.resize(convs.size());
    const T* in = image;
    std::size_t c = spec_.input_channels(), h = height, w = width;
    for (std::size_t l = 0; l < convs.size(); ++l) {
      ConvGeometry g{c, h, w, convs[l].geometry.filters, convs[l].geometry.kernel};
      acts[l].resize(g.output_size());
      conv2d_forward_raw(in, g, store_[convs[l].weight].value.data(), store_[convs[l].bias].value.data(),
                         acts[l].data());
      relu_inplace(acts[l].data(), acts[l].size());
      in = acts[l].data();
      c = g.filters;
      h = g.out_height();
      w = g.out_width();
    }
    return acts.back();
  }

  /// Fully connected head on feature-major inputs.
  /// features_t[s] is [flatten_length x B] for stream s; location_t is [8 x B] unscaled (may be
  /// null when nothing is injected). Returns logits [2 x B] in feature-major layout.
  std::vector<T> head_forward(const std::vector<const T*>& features_t, const T* location_t, std::size_t batch) const {
    HeadCache cache;
    head_forward_impl(features_t, location_t, batch, Mode::infer, nullptr, cache);
    return std::move(cache.outputs.back());
  }

  /// Positive/negative class probabilities for a batch (no gradient bookkeeping).
  Probabilities<T> predict(const NetworkInput<T>& in) const {
    check_input(in);
    Cache cache;
    forward_impl(in, Mode::infer, nullptr, cache);
    return softmax_all(cache.head.outputs.back(), in.batch);
  }

  /// Hash of every ReLU on/off state for an inference pass; equal signatures mean the same
  /// linear piece of the network function (used to keep finite-difference probes off kinks).
  std::uint64_t activation_signature(const NetworkInput<T>& in) const {
    check_input(in);
    Cache cache;
    forward_impl(in, Mode::infer, nullptr, cache);
    std::uint64_t h = 0x9e3779b97f4a7c15ULL, word = 0;
    std::size_t bits = 0;
    auto add = [&](const std::vector<T>& v) {
      for (T x : v) {
        word = (word << 1) | (x > T{0} ? 1u : 0u);
        if (++bits == 64) {
          h = mix64(h ^ word);
          word = 0;
          bits = 0;
        }
      }
    };
    for (const auto& stream : cache.acts)
      for (const auto& sample : stream)
        for (const auto& layer : sample) add(layer);
    for (std::size_t i = 0; i + 1 < cache.head.outputs.size(); ++i) add(cache.head.outputs[i]);
    return mix64(h ^ word ^ bits);
  }

  /// Forward in `mode`, backward of the mean cross-entropy, gradients accumulated into the
  /// parameter store. Returns the summed (not averaged) loss; probabilities optionally.
  double train_batch(const NetworkInput<T>& in, std::span<const int> labels, Mode mode, const DropoutKeys* keys,
                     Probabilities<T>* probabilities = nullptr) {
    check_input(in);
    if (labels.size() != in.batch) throw std::invalid_argument("train_batch: label count does not match batch");
    if (mode == Mode::train && spec_.dropout > 0.0 && (!keys || keys->sample_keys.size() != in.batch)) {
      throw std::invalid_argument("train_batch: dropout keys required for every sample in train mode");
    }
    Cache cache;
    forward_impl(in, mode, keys, cache);
    const std::size_t B = in.batch;
    const auto& logits = cache.head.outputs.back();
    std::vector<T> dlogits(2 * B);
    double loss = 0.0;
    if (probabilities) probabilities->resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      const T z[2] = {logits[b], logits[B + b]};
      const auto r = softmax_cross_entropy<T>(z, labels[b]);
      loss += static_cast<double>(r.loss);
      dlogits[b] = r.logit_grad[0] / static_cast<T>(B);
      dlogits[B + b] = r.logit_grad[1] / static_cast<T>(B);
      if (probabilities) (*probabilities)[b] = r.probabilities;
    }
    backward_impl(in, cache, std::move(dlogits));
    return loss;
  }

 private:
  struct HeadCache {
    std::vector<std::vector<T>> inputs;   // per FC instance, feature-major [inputs x B] after dropout
    std::vector<std::vector<T>> masks;    // per FC instance, [dropped rows x B]; empty in infer mode
    std::vector<std::vector<T>> outputs;  // per FC instance, [units x B], post-ReLU except the last
  };
  struct Cache {
    // acts[s][b][l]: post-ReLU output of conv layer l for sample b in stream s
    std::vector<std::vector<std::vector<std::vector<T>>>> acts;
    HeadCache head;
  };

  void build() {
    const std::size_t sets = spec_.conv_parameter_sets();
    std::vector<std::vector<ConvParams>> per_set(sets);
    for (std::size_t set = 0; set < sets; ++set) {
      std::size_t c = spec_.input_channels(), e = kPatchSize;
      const std::string prefix = sets > 1 ? "s" + std::to_string(set) + "." : "";
      for (std::size_t l = 0; l < spec_.conv_stack.size(); ++l) {
        const auto& cs = spec_.conv_stack[l];
        ConvParams p;
        const std::string name = prefix + "conv" + std::to_string(l + 1);
        p.weight = store_.add(name + ".weight", {cs.filters, c, cs.kernel, cs.kernel});
        p.bias = store_.add(name + ".bias", {cs.filters});
        p.geometry = {c, e, e, cs.filters, cs.kernel};
        per_set[set].push_back(p);
        c = cs.filters;
        e = e - cs.kernel + 1;
      }
    }
    for (std::size_t s = 0; s < spec_.streams(); ++s) stream_convs_.push_back(per_set[sets > 1 ? s : 0]);

    const auto inj = spec_.injected_fc_layer();
    for (std::size_t s = 0; s < spec_.streams(); ++s) {
      FcParams f;
      f.location = inj == 0u;
      f.inputs = spec_.flatten_length() + (f.location ? kLocationFeatures : 0);
      f.units = spec_.fc_widths[0];
      const std::string name = spec_.streams() > 1 ? "s" + std::to_string(s) + ".fc1" : "fc1";
      f.weight = store_.add(name + ".weight", {f.units, f.inputs});
      f.bias = store_.add(name + ".bias", {f.units});
      fcs_.push_back(f);
    }
    std::size_t in = spec_.streams() * spec_.fc_widths[0];
    for (std::size_t l = 1; l < spec_.fc_widths.size(); ++l) {
      FcParams f;
      f.location = inj == l;
      f.inputs = in + (f.location ? kLocationFeatures : 0);
      f.units = spec_.fc_widths[l];
      const std::string name = "fc" + std::to_string(l + 1);
      f.weight = store_.add(name + ".weight", {f.units, f.inputs});
      f.bias = store_.add(name + ".bias", {f.units});
      fcs_.push_back(f);
      in = f.units;
    }
  }

  static Probabilities<T> softmax_all(const std::vector<T>& logits_t, std::size_t batch) {
    Probabilities<T> p(batch);
    for (std::size_t b = 0; b < batch; ++b) p[b] = softmax2(logits_t[b], logits_t[batch + b]);
    return p;
  }

  void forward_impl(const NetworkInput<T>& in, Mode mode, const DropoutKeys* keys, Cache& cache) const {
    const std::size_t B = in.batch, S = spec_.streams(), F = spec_.flatten_length();
    const std::size_t sample_size = spec_.input_channels() * kPatchSize * kPatchSize;
    cache.acts.assign(S, std::vector<std::vector<std::vector<T>>>(B));
    std::vector<std::vector<T>> flat_t(S, std::vector<T>(F * B));
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t b = 0; b < B; ++b) {
        const auto& out = stream_forward(s, in.streams[s].data() + b * sample_size, kPatchSize, kPatchSize,
                                         cache.acts[s][b]);
        T* dst = flat_t[s].data() + b;
        for (std::size_t f = 0; f < F; ++f) dst[f * B] = out[f];
      }
    }
    std::vector<T> loc_t(kLocationFeatures * B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < kLocationFeatures; ++f) loc_t[f * B + b] = in.location.at(b, f);
    std::vector<const T*> feats(S);
    for (std::size_t s = 0; s < S; ++s) feats[s] = flat_t[s].data();
    head_forward_impl(feats, loc_t.data(), B, mode, keys, cache.head);
  }

  void head_forward_impl(const std::vector<const T*>& features_t, const T* location_t, std::size_t B, Mode mode,
                         const DropoutKeys* keys, HeadCache& hc) const {
    const std::size_t S = spec_.streams();
    const bool drop = mode == Mode::train && spec_.dropout > 0.0;
    const T alpha = static_cast<T>(spec_.alpha);
    hc.inputs.assign(fcs_.size(), {});
    hc.masks.assign(fcs_.size(), {});
    hc.outputs.assign(fcs_.size(), {});
    for (std::size_t i = 0; i < fcs_.size(); ++i) {
      const FcParams& f = fcs_[i];
      const std::size_t dropped_rows = f.inputs - (f.location ? kLocationFeatures : 0);
      auto& x = hc.inputs[i];
      x.resize(f.inputs * B);
      if (i < S) {
        std::copy(features_t[i], features_t[i] + dropped_rows * B, x.begin());
      } else if (i == S) {
        for (std::size_t s = 0; s < S; ++s)
          std::copy(hc.outputs[s].begin(), hc.outputs[s].end(), x.begin() + s * fcs_[s].units * B);
      } else {
        std::copy(hc.outputs[i - 1].begin(), hc.outputs[i - 1].end(), x.begin());
      }
      if (f.location) {
        if (!location_t) throw std::invalid_argument("network: location features required by injection point");
        T* dst = x.data() + dropped_rows * B;
        for (std::size_t r = 0; r < kLocationFeatures * B; ++r) dst[r] = alpha * location_t[r];
      }
      if (drop) {
        auto& mask = hc.masks[i];
        mask.resize(dropped_rows * B);
        std::vector<T> sample_mask(dropped_rows);
        for (std::size_t b = 0; b < B; ++b) {
          CounterRng rng = CounterRng(keys->seed, Purpose::dropout, keys->sample_keys[b]).substream(i);
          dropout_mask(dropped_rows, spec_.dropout, rng, sample_mask.data());
          for (std::size_t r = 0; r < dropped_rows; ++r) mask[r * B + b] = sample_mask[r];
        }
        for (std::size_t r = 0; r < dropped_rows * B; ++r) x[r] *= mask[r];
      }
      auto& y = hc.outputs[i];
      y.resize(f.units * B);
      fc_forward_batch(x.data(), f.inputs, B, store_[f.weight].value.data(), store_[f.bias].value.data(), f.units,
                       y.data());
      if (i + 1 < fcs_.size()) relu_inplace(y.data(), y.size());
    }
  }

  void backward_impl(const NetworkInput<T>& in, Cache& cache, std::vector<T> dlogits) {
    const std::size_t B = in.batch, S = spec_.streams(), F = spec_.flatten_length();
    auto& hc = cache.head;
    std::vector<std::vector<T>> d_out(fcs_.size());
    d_out.back() = std::move(dlogits);
    std::vector<T> rows, d_in;
    std::vector<std::vector<T>> d_flat_t(S);
    for (std::size_t i = fcs_.size(); i-- > 0;) {
      const FcParams& f = fcs_[i];
      const std::size_t dropped_rows = f.inputs - (f.location ? kLocationFeatures : 0);
      const auto& x = hc.inputs[i];
      rows.resize(f.inputs * B);
      transpose(x.data(), f.inputs, B, rows.data());
      d_in.resize(f.inputs * B);
      auto& w = store_[f.weight];
      auto& bias = store_[f.bias];
      fc_backward_batch(d_out[i].data(), rows.data(), f.inputs, B, w.value.data(), f.units, w.grad.data(),
                        bias.grad.data(), d_in.data());
      if (!hc.masks[i].empty())
        for (std::size_t r = 0; r < dropped_rows * B; ++r) d_in[r] *= hc.masks[i][r];
      if (i < S) {
        d_flat_t[i].assign(d_in.begin(), d_in.begin() + F * B);
      } else if (i == S) {
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t n = fcs_[s].units * B;
          d_out[s].assign(d_in.begin() + s * n, d_in.begin() + (s + 1) * n);
          relu_backward_inplace(d_out[s].data(), hc.outputs[s].data(), n);
        }
      } else {
        const std::size_t n = fcs_[i - 1].units * B;
        d_out[i - 1].assign(d_in.begin(), d_in.begin() + n);
        relu_backward_inplace(d_out[i - 1].data(), hc.outputs[i - 1].data(), n);
      }
    }

    const std::size_t sample_size = spec_.input_channels() * kPatchSize * kPatchSize;
    std::vector<T> grad, grad_in;
    for (std::size_t s = 0; s < S; ++s) {
      const auto& convs = stream_convs_[s];
      for (std::size_t b = 0; b < B; ++b) {
        auto& acts = cache.acts[s][b];
        grad.resize(F);
        for (std::size_t q = 0; q < F; ++q) grad[q] = d_flat_t[s][q * B + b];
        for (std::size_t l = convs.size(); l-- > 0;) {
          const auto& cp = convs[l];
          relu_backward_inplace(grad.data(), acts[l].data(), grad.size());
          const T* layer_in = l == 0 ? in.streams[s].data() + b * sample_size : acts[l - 1].data();
          auto& w = store_[cp.weight];
          auto& bias = store_[cp.bias];
          if (l > 0) grad_in.resize(cp.geometry.input_size());
          conv2d_backward_raw(grad.data(), layer_in, cp.geometry, w.value.data(), w.grad.data(), bias.grad.data(),
                              l > 0 ? grad_in.data() : nullptr);
          if (l > 0) std::swap(grad, grad_in);
        }
      }
    }
  }

  static void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
    constexpr std::size_t blk = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += blk)
      for (std::size_t c0 = 0; c0 < cols; c0 += blk)
        for (std::size_t r = r0; r < std::min(rows, r0 + blk); ++r)
          for (std::size_t c = c0; c < std::min(cols, c0 + blk); ++c) dst[c * rows + r] = src[r * cols + c];
  }

  NetworkSpec spec_;
  ParameterStore<T> store_;
  std::vector<std::vector<ConvParams>> stream_convs_;
  std::vector<FcParams> fcs_;
};

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'N', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Header "LSNN", u32 version, u32 spec-JSON length, spec JSON, then every parameter
/// tensor as f32 in declaration order.
template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::string json = to_json(net.spec()).dump();
  const auto len = static_cast<std::uint32_t>(json.size());
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(json.data(), len);
  std::vector<float> buf;
  for (const auto& p : net.parameters()) {
    buf.assign(p.value.values().begin(), p.value.values().end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

template <typename T = float>
Network<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  std::uint32_t version = 0, len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw std::runtime_error(path + ": not an LSNN checkpoint");
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::string json(len, '\0');
  in.read(json.data(), len);
  Network<T> net(spec_from_json(nlohmann::json::parse(json)));
  std::vector<float> buf;
  for (auto& p : net.parameters()) {
    buf.resize(p.value.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path + ": truncated while reading " + p.name);
    std::copy(buf.begin(), buf.end(), p.value.data());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path + ": trailing bytes after parameters");
  return net;
}

}  // namespace locseg

#endif  // LOCSEG_NETWORK_HPP
