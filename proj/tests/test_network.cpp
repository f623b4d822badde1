#include <gtest/gtest.h>

#include <cmath>

#include "locseg/engine/gradient_check.hpp"
#include "locseg/network.hpp"
#include "test_support.hpp"

using namespace locseg;
using locseg::testing::random_tensor;

namespace {

NetworkSpec make_spec(FusionMode fusion, InjectionPoint injection = InjectionPoint::none, double alpha = 1.0) {
  NetworkSpec spec;
  spec.fusion = fusion;
  spec.injection = injection;
  spec.alpha = alpha;
  return spec;
}

// Narrow variant for exhaustive property tests; same layer structure as the real net.
NetworkSpec small_spec(FusionMode fusion, InjectionPoint injection = InjectionPoint::none, double alpha = 1.0) {
  NetworkSpec spec = make_spec(fusion, injection, alpha);
  spec.conv_stack = {{3, 7}, {4, 5}, {3, 3}, {2, 3}};
  spec.fc_widths = {6, 5, 2};
  return spec;
}

template <typename T>
NetworkInput<T> random_input(const NetworkSpec& spec, std::size_t batch, std::uint64_t seed) {
  NetworkInput<T> in;
  in.batch = batch;
  for (std::size_t s = 0; s < spec.streams(); ++s)
    in.streams.push_back(random_tensor<T>({batch, spec.input_channels(), kPatchSize, kPatchSize}, seed * 10 + s, 0, 1));
  in.location = random_tensor<T>({batch, kLocationFeatures}, seed * 10 + 9, 0, 1);
  return in;
}

template <typename T>
NetworkInput<T> slice_input(const NetworkInput<T>& in, std::size_t b) {
  NetworkInput<T> one;
  one.batch = 1;
  for (const auto& s : in.streams) {
    const std::size_t n = s.size() / in.batch;
    one.streams.emplace_back(Shape{1, s.dim(1), s.dim(2), s.dim(3)},
                             std::vector<T>(s.data() + b * n, s.data() + (b + 1) * n));
  }
  one.location = Tensor<T>({1, kLocationFeatures},
                           std::vector<T>(in.location.data() + b * kLocationFeatures,
                                          in.location.data() + (b + 1) * kLocationFeatures));
  return one;
}

std::vector<NetworkSpec> all_small_variants() {
  std::vector<NetworkSpec> out;
  for (auto f : {FusionMode::ss, FusionMode::msef, FusionMode::msiw, FusionMode::msws})
    for (auto p : {InjectionPoint::none, InjectionPoint::lcl, InjectionPoint::ffcl, InjectionPoint::sfcl}) {
      if (p == InjectionPoint::lcl && (f == FusionMode::msiw || f == FusionMode::msws)) continue;
      out.push_back(small_spec(f, p, 0.7));
    }
  return out;
}

std::string label(const NetworkSpec& s) { return to_string(s.fusion) + "+" + to_string(s.injection); }

}  // namespace

// ---------------------------------------------------------------- counts and shapes

TEST(ParameterCount, ConvolutionalTotals) {
  // C_out * (C_in * k^2) + C_out per layer
  const std::size_t ss_conv = (20 * 2 * 49 + 20) + (40 * 20 * 25 + 40) + (80 * 40 * 9 + 80) + (110 * 80 * 9 + 110);
  EXPECT_EQ(ss_conv, 130210u);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::ss)).conv, 130210u);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::msiw)).conv, 3 * 130210u);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::msws)).conv, 130210u);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::msef)).conv, 130210u + 20 * 4 * 49);
}

TEST(ParameterCount, SingleScaleTotalExceedsOneMillion) {
  const auto pc = parameter_count(make_spec(FusionMode::ss));
  const std::size_t fc = (300 * 35640 + 300) + (200 * 300 + 200) + (2 * 200 + 2);
  EXPECT_EQ(pc.fully_connected, fc);
  EXPECT_EQ(pc.total, 130210u + fc);
  EXPECT_GT(pc.total, 1000000u);
}

TEST(ParameterCount, MatchesBuiltStoreForEveryVariant) {
  for (const auto& base : all_small_variants()) {
    NetworkSpec full = base;
    full.conv_stack = NetworkSpec{}.conv_stack;
    full.fc_widths = NetworkSpec{}.fc_widths;
    for (const auto& spec : {base, full}) {
      Network<float> net(spec);
      EXPECT_EQ(parameter_count(spec).total, net.parameters().element_count()) << label(spec);
    }
  }
  const std::size_t loc = kLocationFeatures;
  EXPECT_EQ(parameter_count(make_spec(FusionMode::ss, InjectionPoint::lcl)).total -
                parameter_count(make_spec(FusionMode::ss)).total,
            300 * loc);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::ss, InjectionPoint::ffcl)).total -
                parameter_count(make_spec(FusionMode::ss)).total,
            200 * loc);
  EXPECT_EQ(parameter_count(make_spec(FusionMode::ss, InjectionPoint::sfcl)).total -
                parameter_count(make_spec(FusionMode::ss)).total,
            2 * loc);
}

TEST(Shapes, ValidConvolutionChain) {
  const NetworkSpec spec = make_spec(FusionMode::ss);
  EXPECT_EQ(spec.feature_extent(), 18u);
  EXPECT_EQ(spec.flatten_length(), 35640u);
  Network<float> net(spec);
  net.initialize(1);
  const std::size_t expected[] = {26, 22, 20, 18};
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(net.conv_layers(0)[l].geometry.out_height(), expected[l]);
    EXPECT_EQ(net.conv_layers(0)[l].geometry.out_width(), expected[l]);
  }
  auto in = random_input<float>(spec, 1, 3);
  std::vector<std::vector<float>> acts;
  EXPECT_EQ(net.stream_forward(0, in.streams[0].data(), 32, 32, acts).size(), 35640u);
}

TEST(Shapes, EveryFusionModeYieldsBatchByTwo) {
  for (auto f : {FusionMode::ss, FusionMode::msef, FusionMode::msiw, FusionMode::msws}) {
    Network<float> net(make_spec(f));
    net.initialize(2);
    const auto probs = net.predict(random_input<float>(net.spec(), 3, 4));
    ASSERT_EQ(probs.size(), 3u) << to_string(f);
    for (const auto& p : probs) {
      EXPECT_NEAR(p[0] + p[1], 1.0, 1e-6);
      EXPECT_GT(p[1], 0.0f);
      EXPECT_LT(p[1], 1.0f);
    }
  }
}

TEST(Shapes, EarlyFusionNeedsSixChannels) {
  Network<float> msef(make_spec(FusionMode::msef));
  EXPECT_EQ(msef.spec().input_channels(), 6u);
  EXPECT_NO_THROW(msef.check_input(random_input<float>(msef.spec(), 1, 1)));
  auto two = random_input<float>(make_spec(FusionMode::ss), 1, 1);
  try {
    msef.predict(two);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
  }
}

TEST(Spec, Validation) {
  EXPECT_THROW(Network<float>(make_spec(FusionMode::msiw, InjectionPoint::lcl)), std::invalid_argument);
  EXPECT_THROW(Network<float>(make_spec(FusionMode::msws, InjectionPoint::lcl)), std::invalid_argument);
  EXPECT_THROW(Network<float>(make_spec(FusionMode::ss, InjectionPoint::ffcl, 0.0)), std::invalid_argument);
  NetworkSpec bad = make_spec(FusionMode::ss);
  bad.fc_widths = {300, 200, 3};
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = make_spec(FusionMode::ss);
  bad.conv_stack.push_back({10, 19});
  EXPECT_THROW(validate(bad), std::invalid_argument);
  EXPECT_THROW(parse_fusion("late"), std::invalid_argument);
  EXPECT_THROW(parse_injection("fc3"), std::invalid_argument);
}

TEST(Spec, JsonRoundTrip) {
  for (const auto& spec : all_small_variants()) {
    const auto j = to_json(spec);
    for (const char* key : {"fusion", "injection", "alpha", "conv_stack", "fc_widths", "dropout", "scales"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(spec_from_json(nlohmann::json::parse(j.dump())), spec) << label(spec);
  }
}

// ---------------------------------------------------------------- forward semantics

TEST(Forward, InferenceIsDeterministicAndBatchIndependent) {
  for (const auto& spec : all_small_variants()) {
    Network<float> net(spec);
    net.initialize(5);
    const auto in = random_input<float>(spec, 4, 6);
    const auto a = net.predict(in);
    EXPECT_EQ(a, net.predict(in)) << label(spec);
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(net.predict(slice_input(in, b))[0], a[b]) << label(spec);
  }
}

TEST(Forward, InferenceEqualsNetworkWithoutDropout) {
  NetworkSpec spec = small_spec(FusionMode::msiw, InjectionPoint::ffcl);
  Network<float> with(spec);
  with.initialize(8);
  spec.dropout = 0.0;
  Network<float> without(spec);
  for (std::size_t i = 0; i < with.parameters().size(); ++i)
    without.parameters()[i].value = with.parameters()[i].value;
  const auto in = random_input<float>(spec, 3, 9);
  EXPECT_EQ(with.predict(in), without.predict(in));
}

TEST(Forward, TrainModeDropoutIsKeyedPerSample) {
  const NetworkSpec spec = small_spec(FusionMode::ss, InjectionPoint::ffcl);
  Network<double> net(spec);
  net.initialize(10);
  const auto in = random_input<double>(spec, 3, 11);
  const std::vector<int> labels = {1, 0, 1};
  const std::vector<std::uint64_t> keys = {100, 101, 102};
  DropoutKeys dk{7, keys};
  Probabilities<double> p1, p2, infer, single;
  net.train_batch(in, labels, Mode::train, &dk, &p1);
  net.train_batch(in, labels, Mode::train, &dk, &p2);
  net.train_batch(in, labels, Mode::infer, nullptr, &infer);
  EXPECT_EQ(p1, p2);
  EXPECT_NE(p1, infer);
  // The same sample key in a different batch draws the same masks.
  const std::vector<std::uint64_t> one_key = {101};
  DropoutKeys dk1{7, one_key};
  net.train_batch(slice_input(in, 1), std::vector<int>{0}, Mode::train, &dk1, &single);
  EXPECT_EQ(single[0], p1[1]);
  EXPECT_THROW(net.train_batch(in, labels, Mode::train, nullptr), std::invalid_argument);
}

TEST(Forward, ZeroAlphaMatchesZeroedLocation) {
  for (auto p : {InjectionPoint::lcl, InjectionPoint::ffcl, InjectionPoint::sfcl}) {
    Network<float> net(small_spec(FusionMode::ss, p));
    net.initialize(12);
    auto in = random_input<float>(net.spec(), 3, 13);
    net.set_alpha(0.0);
    const auto zero_alpha = net.predict(in);
    net.set_alpha(1.0);
    in.location.fill(0.0f);
    EXPECT_EQ(zero_alpha, net.predict(in)) << to_string(p);
  }
}

TEST(Forward, ZeroLocationEqualsNetworkWithoutColumns) {
  for (const auto& spec : all_small_variants()) {
    if (spec.injection == InjectionPoint::none) continue;
    Network<double> injected(spec);
    injected.initialize(14);
    NetworkSpec plain_spec = spec;
    plain_spec.injection = InjectionPoint::none;
    Network<double> plain(plain_spec);
    // Copy every parameter, dropping the trailing 8 location columns of the widened layer.
    for (std::size_t i = 0; i < plain.parameters().size(); ++i) {
      auto& dst = plain.parameters()[i].value;
      const auto& src = injected.parameters()[i].value;
      ASSERT_EQ(plain.parameters()[i].name, injected.parameters()[i].name);
      if (dst.shape() == src.shape()) {
        dst = src;
        continue;
      }
      ASSERT_EQ(src.dim(1), dst.dim(1) + kLocationFeatures);
      for (std::size_t r = 0; r < dst.dim(0); ++r)
        for (std::size_t c = 0; c < dst.dim(1); ++c) dst.at(r, c) = src.at(r, c);
    }
    auto in = random_input<double>(spec, 3, 15);
    in.location.fill(0.0);
    const auto a = injected.predict(in);
    const auto b = plain.predict(in);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(a[k][1], b[k][1], 1e-12) << label(spec);
      EXPECT_EQ(a[k][1] > 0.5, b[k][1] > 0.5);
    }
  }
}

TEST(Forward, AlphaReparameterizationIsInvariant) {
  for (auto p : {InjectionPoint::lcl, InjectionPoint::ffcl, InjectionPoint::sfcl}) {
    for (double c : {4.0, 3.0}) {
      Network<double> net(small_spec(FusionMode::ss, p, 0.5));
      net.initialize(16);
      const auto in = random_input<double>(net.spec(), 3, 17);
      const auto before = net.predict(in);
      const std::size_t layer = *net.spec().injected_fc_layer();
      auto& w = net.parameters()[net.fc_layer(layer).weight].value;
      for (std::size_t r = 0; r < w.dim(0); ++r)
        for (std::size_t k = w.dim(1) - kLocationFeatures; k < w.dim(1); ++k) w.at(r, k) /= c;
      net.set_alpha(0.5 * c);
      const auto after = net.predict(in);
      for (std::size_t b = 0; b < 3; ++b) {
        if (c == 4.0) {
          EXPECT_EQ(before[b], after[b]) << to_string(p);  // power-of-two scaling is exact
        } else {
          EXPECT_NEAR(before[b][1], after[b][1], 1e-14) << to_string(p);
        }
      }
    }
  }
}

TEST(Forward, FreshNetworkProbabilitiesAreModerate) {
  Network<float> net(make_spec(FusionMode::ss));
  net.initialize(18);
  const auto probs = net.predict(random_input<float>(net.spec(), 8, 19));
  for (const auto& p : probs) {
    EXPECT_NEAR(p[0] + p[1], 1.0f, 1e-6f);
    EXPECT_GT(p[1], 0.01f);
    EXPECT_LT(p[1], 0.99f);
  }
}

// ---------------------------------------------------------------- weight sharing

TEST(WeightSharing, SharedStreamsReferenceOneParameterSet) {
  Network<float> msws(make_spec(FusionMode::msws));
  Network<float> msiw(make_spec(FusionMode::msiw));
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(msws.conv_layers(0)[l].weight, msws.conv_layers(1)[l].weight);
    EXPECT_EQ(msws.conv_layers(0)[l].weight, msws.conv_layers(2)[l].weight);
    EXPECT_NE(msiw.conv_layers(0)[l].weight, msiw.conv_layers(1)[l].weight);
  }
  EXPECT_NE(msws.fc_layer(0).weight, msws.fc_layer(1).weight);  // per-scale first FC layers stay separate
}

TEST(WeightSharing, SharedGradientIsSumOfPerStreamGradients) {
  // An independent-weight net with three identical copies of the shared filters must see,
  // per copy, exactly the per-stream contributions whose sum the shared net accumulates.
  const NetworkSpec ws = small_spec(FusionMode::msws, InjectionPoint::ffcl);
  NetworkSpec iw = ws;
  iw.fusion = FusionMode::msiw;
  Network<double> shared(ws), independent(iw);
  shared.initialize(20);
  for (auto& p : independent.parameters()) {
    std::string name = p.name;
    if (name.rfind("s", 0) == 0 && name.find(".conv") != std::string::npos) name = name.substr(name.find('.') + 1);
    p.value = shared.parameters()[shared.parameters().find(name)].value;
  }
  const auto in = random_input<double>(ws, 2, 21);
  const std::vector<int> labels = {1, 0};
  const double l1 = shared.train_batch(in, labels, Mode::infer, nullptr);
  const double l2 = independent.train_batch(in, labels, Mode::infer, nullptr);
  EXPECT_EQ(l1, l2);
  for (std::size_t l = 0; l < ws.conv_stack.size(); ++l) {
    const auto& g = shared.parameters()[shared.conv_layers(0)[l].weight].grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double sum = 0.0;
      for (std::size_t s = 0; s < 3; ++s) sum += independent.parameters()[independent.conv_layers(s)[l].weight].grad[i];
      ASSERT_NEAR(g[i], sum, 1e-12 * std::max(1.0, std::abs(sum)));
    }
  }
  rmsprop_step(shared.parameters(), {});
  for (std::size_t l = 0; l < 4; ++l)
    EXPECT_EQ(shared.conv_layers(1)[l].weight, shared.conv_layers(2)[l].weight);
}

// ---------------------------------------------------------------- gradients

namespace {
// Zero-initialized biases put units with a dead receptive field exactly on the ReLU kink,
// where central differences straddle two slopes; checks run at a generic point instead.
void jitter_biases(Network<double>& net, std::uint64_t seed) {
  for (auto& p : net.parameters())
    if (p.value.rank() == 1) p.value = random_tensor<double>(p.value.shape(), seed++, -0.05, 0.05);
}

double forward_loss(const Network<double>& net, const NetworkInput<double>& in, const std::vector<int>& labels) {
  const auto probs = net.predict(in);
  double loss = 0.0;
  for (std::size_t b = 0; b < probs.size(); ++b) loss -= std::log(probs[b][labels[b]]);
  return loss / static_cast<double>(probs.size());
}

GradientCheckReport check_network(Network<double>& net, std::uint64_t seed, std::size_t batch = 1,
                                  bool kink_guard = false) {
  jitter_biases(net, seed * 100);
  const auto in = random_input<double>(net.spec(), batch, seed);
  std::vector<int> labels(batch);
  for (std::size_t b = 0; b < batch; ++b) labels[b] = static_cast<int>((b + seed) % 2);
  GradientCheckOptions options;
  options.seed = seed;
  if (kink_guard) options.region = [&] { return net.activation_signature(in); };
  return gradient_check(
      net.parameters(), [&] { return forward_loss(net, in, labels); },
      [&] { net.train_batch(in, labels, Mode::infer, nullptr); }, options);
}
}  // namespace

TEST(Gradients, FullSingleScaleNetwork) {
  NetworkSpec spec = make_spec(FusionMode::ss);
  spec.dropout = 0.0;
  Network<double> net(spec);
  net.initialize(22);
  const auto report = check_network(net, 23, 2, true);
  EXPECT_LT(report.skipped_nonsmooth * 10, report.checked);
  for (const auto& p : report.parameters)
    EXPECT_LE(p.max_relative_error, 1e-4) << p.name << " analytic " << p.analytic << " numeric " << p.numeric;
  EXPECT_TRUE(report.passed);
}

TEST(Gradients, EveryFusionAndInjectionVariant) {
  for (auto spec : all_small_variants()) {
    spec.dropout = 0.0;
    Network<double> net(spec);
    net.initialize(24);
    // The narrow streams keep many pre-activations within 1e-5 of zero, so a bias probe can
    // cross a ReLU kink; such probes are skipped, and only a small share may be.
    const auto report = check_network(net, 25, 3, true);
    EXPECT_TRUE(report.passed) << label(spec) << " max relative error " << report.max_relative_error;
    EXPECT_LT(report.skipped_nonsmooth, report.checked) << label(spec);
    for (const auto& p : report.parameters) EXPECT_GT(p.checked, 0u) << label(spec) << " " << p.name;
  }
}

TEST(Gradients, DropoutMasksAreAppliedInBackward) {
  // With fixed masks the train-mode loss is a smooth function of the parameters.
  Network<double> net(small_spec(FusionMode::msef, InjectionPoint::sfcl));
  net.initialize(26);
  jitter_biases(net, 260);
  const auto in = random_input<double>(net.spec(), 2, 27);
  const std::vector<int> labels = {0, 1};
  const std::vector<std::uint64_t> keys = {5, 6};
  DropoutKeys dk{3, keys};
  const auto report = gradient_check(
      net.parameters(), [&] { return net.train_batch(in, labels, Mode::train, &dk) / 2; },
      [&] { net.train_batch(in, labels, Mode::train, &dk); });
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Gradients, CorruptedGradientIsDetected) {
  Network<double> net(small_spec(FusionMode::ss));
  net.initialize(28);
  jitter_biases(net, 280);
  const auto in = random_input<double>(net.spec(), 1, 29);
  const std::vector<int> labels = {1};
  const auto report = gradient_check(
      net.parameters(), [&] { return forward_loss(net, in, labels); },
      [&] {
        net.train_batch(in, labels, Mode::infer, nullptr);
        for (auto& p : net.parameters())
          for (auto& v : p.grad.values()) v = -v;
      });
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_relative_error, 0.1);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTrip) {
  const auto dir = locseg::testing::scratch_dir("checkpoint");
  for (const auto& spec : all_small_variants()) {
    Network<float> net(spec);
    net.initialize(30);
    const auto path = (dir / "net.lsnn").string();
    save_checkpoint(path, net);
    const auto loaded = load_checkpoint<float>(path);
    EXPECT_EQ(loaded.spec(), spec);
    ASSERT_EQ(loaded.parameters().size(), net.parameters().size());
    for (std::size_t i = 0; i < net.parameters().size(); ++i) {
      EXPECT_EQ(loaded.parameters()[i].name, net.parameters()[i].name);
      EXPECT_EQ(loaded.parameters()[i].value, net.parameters()[i].value);
    }
    const auto in = random_input<float>(spec, 2, 31);
    EXPECT_EQ(loaded.predict(in), net.predict(in));
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = locseg::testing::scratch_dir("checkpoint_bad");
  Network<float> net(small_spec(FusionMode::ss));
  net.initialize(32);
  const auto path = (dir / "net.lsnn").string();
  save_checkpoint(path, net);
  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
  write(bytes + "x");
  EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
  EXPECT_THROW(load_checkpoint<float>((dir / "missing").string()), std::runtime_error);
}
