#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "locseg/patches.hpp"
#include "test_support.hpp"

using namespace locseg;

namespace {

PreparedCase blank_case(const std::string& id, Dims d = {48, 40, 3}) {
  PreparedCase c;
  c.case_id = id;
  const Spacing s{1, 1, 5};
  c.channels = {ImageVolume(d, s), ImageVolume(d, s)};
  c.brain_mask = MaskVolume(d, s, 1);
  c.annotation = MaskVolume(d, s);
  return c;
}

PreparedCase ramp_case() {
  auto c = blank_case("ramp", {160, 150, 2});
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 150; ++y)
      for (std::size_t x = 0; x < 160; ++x) {
        c.channels[0](x, y, z) = static_cast<float>(x + 1000 * y);
        c.channels[1](x, y, z) = static_cast<float>(z + 1);
      }
  return c;
}

PreparedCase annotated_case(const std::string& id, std::size_t lesions, std::uint64_t seed) {
  auto c = blank_case(id);
  CounterRng rng(seed, Purpose::test);
  for (auto& v : c.channels[0].values) v = static_cast<float>(rng.uniform());
  for (std::size_t i = 0; i < c.brain_mask.size(); ++i) c.brain_mask[i] = c.brain_mask.coords(i)[0] >= 4;
  std::size_t placed = 0;
  while (placed < lesions) {
    const std::size_t i = rng.below(c.annotation.size());
    if (!c.brain_mask[i] || c.annotation[i]) continue;
    c.annotation[i] = 1;
    ++placed;
  }
  LocationFeatureSet loc;
  for (std::size_t f = 0; f < kLocationFeatures; ++f) {
    loc[f] = ImageVolume(c.dims(), c.brain_mask.voxel_size);
    for (std::size_t i = 0; i < loc[f].size(); ++i) loc[f][i] = static_cast<float>((i * (f + 3)) % 97) / 96.0f;
  }
  c.location = loc;
  return c;
}

}  // namespace

TEST(Patch, SmallScaleCoversCenterMinusHalfToCenterPlusHalfMinusOne) {
  const auto c = ramp_case();
  std::vector<float> p(kScalePatchValues);
  extract_scale_patch(c, 70, 60, 1, 32, p.data());
  EXPECT_EQ(p[0], static_cast<float>(54 + 1000 * 44));
  EXPECT_EQ(p[31 * 32 + 31], static_cast<float>(85 + 1000 * 75));
  EXPECT_EQ(p[5 * 32 + 9], static_cast<float>(63 + 1000 * 49));
  for (std::size_t i = 1024; i < 2048; ++i) EXPECT_EQ(p[i], 2.0f);
}

TEST(Patch, LargerScalesAreBlockMeans) {
  const auto c = ramp_case();
  std::vector<float> p(kScalePatchValues);
  extract_scale_patch(c, 80, 70, 0, 128, p.data());
  // pixel (px, py) averages x in [16 + 4px, 19 + 4px], y in [6 + 4py, 9 + 4py]
  EXPECT_FLOAT_EQ(p[3 * 32 + 2], static_cast<float>(16 + 8 + 1.5 + 1000 * (6 + 12 + 1.5)));
  extract_scale_patch(c, 80, 70, 0, 64, p.data());
  EXPECT_FLOAT_EQ(p[0], static_cast<float>(48 + 0.5 + 1000 * 38.5));
}

TEST(Patch, CheckerboardPoolsToHalf) {
  auto c = blank_case("cb", {64, 64, 1});
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) c.channels[0](x, y, 0) = static_cast<float>((x + y) % 2);
  std::vector<float> p(kScalePatchValues);
  extract_scale_patch(c, 32, 32, 0, 64, p.data());
  for (std::size_t i = 0; i < 1024; ++i) EXPECT_EQ(p[i], 0.5f);
}

TEST(Patch, OutsideVolumeIsZeroPadded) {
  auto c = blank_case("pad", {40, 40, 1});
  for (auto& v : c.channels[0].values) v = 1.0f;
  std::vector<float> p(kScalePatchValues);
  extract_scale_patch(c, 0, 0, 0, 32, p.data());
  EXPECT_EQ(p[0], 0.0f);
  EXPECT_EQ(p[15 * 32 + 15], 0.0f);
  EXPECT_EQ(p[16 * 32 + 16], 1.0f);
  extract_scale_patch(c, 0, 0, 0, 64, p.data());
  EXPECT_EQ(p[16 * 32 + 16], 1.0f);
  EXPECT_EQ(p[15 * 32 + 16], 0.0f);
  // half of a 2x2 block lies outside
  extract_scale_patch(c, 1, 1, 0, 64, p.data());
  EXPECT_EQ(p[15 * 32 + 15], 0.25f);
}

TEST(Patch, CenterMustBeInsideBrain) {
  auto c = annotated_case("m", 3, 1);
  std::vector<float> p(kPatchValues), loc(8);
  EXPECT_THROW(extract_multiscale_patch(c, 1, 5, 0, p.data(), loc.data()), std::invalid_argument);
  EXPECT_THROW(extract_multiscale_patch(c, 100, 5, 0, p.data(), loc.data()), std::out_of_range);
  EXPECT_NO_THROW(extract_multiscale_patch(c, 10, 5, 0, p.data(), loc.data()));
  EXPECT_EQ(loc[2], (*c.location)[2](10, 5, 0));
}

TEST(Prepare, NormalizesInsideMask) {
  CaseRecord r;
  r.case_id = "p";
  const Dims d{3, 1, 1};
  r.flair = ImageVolume(d, {1, 1, 1});
  r.flair.values = {10, 50, 30};
  r.t1 = r.flair;
  r.brain_mask = MaskVolume(d, {1, 1, 1}, 1);
  r.annotation = r.ventricle_left = r.ventricle_right = MaskVolume(d, {1, 1, 1});
  const auto p = prepare_case(r);
  EXPECT_EQ(p.channels[0].values, (std::vector<float>{0.0f, 1.0f, 0.5f}));
}

TEST(Balanced, HundredPositivesGiveFiftyEach) {
  const auto a = annotated_case("a", 60, 1), b = annotated_case("b", 40, 2);
  const auto set = build_balanced_dataset(std::vector<PreparedCase>{a, b}, 7);
  EXPECT_EQ(set.size(), 100u);
  EXPECT_EQ(set.positives(), 50u);
  const std::vector<const PreparedCase*> cases{&a, &b};
  std::set<std::pair<std::uint32_t, std::uint64_t>> seen;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& c = *cases[set.case_index[i]];
    EXPECT_EQ(set.case_ids[set.case_index[i]], c.case_id);
    EXPECT_TRUE(c.brain_mask[set.voxel[i]]);
    EXPECT_EQ(set.labels[i], c.annotation[set.voxel[i]]);
    EXPECT_TRUE(seen.insert({set.case_index[i], set.voxel[i]}).second);
  }
}

TEST(Balanced, OddPositiveCountRoundsUp) {
  const auto a = annotated_case("a", 7, 3);
  const auto set = build_balanced_dataset(std::vector<PreparedCase>{a}, 1);
  EXPECT_EQ(set.positives(), 4u);
  EXPECT_EQ(set.size(), 8u);
}

TEST(Balanced, DeterministicAndOrderIndependent) {
  const auto a = annotated_case("a", 30, 1), b = annotated_case("b", 30, 2);
  const auto s1 = build_balanced_dataset(std::vector<PreparedCase>{a, b}, 11);
  const auto s2 = build_balanced_dataset(std::vector<PreparedCase>{b, a}, 11);
  EXPECT_EQ(s1, s2);
  const auto s3 = build_balanced_dataset(std::vector<PreparedCase>{a, b}, 12);
  EXPECT_NE(s1.voxel, s3.voxel);
}

TEST(Balanced, NoAnnotationIsRejected) {
  const auto a = annotated_case("a", 0, 1);
  EXPECT_THROW(build_balanced_dataset(std::vector<PreparedCase>{a}, 1), std::invalid_argument);
}

TEST(Balanced, NegativesAreUniformOverBackground) {
  auto c = blank_case("u", {10, 10, 2});
  for (std::size_t i = 0; i < 20; ++i) c.annotation[i * 10] = 1;
  const std::size_t background = 200 - 20;
  std::vector<int> hits(200, 0);
  const int trials = 1800;
  for (int s = 0; s < trials; ++s) {
    const auto set = build_balanced_dataset(std::vector<PreparedCase>{c}, static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < set.size(); ++i)
      if (!set.labels[i]) ++hits[set.voxel[i]];
  }
  // each background voxel is picked with probability 10/180
  const double expected = trials * 10.0 / background;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    if (c.annotation[i]) {
      EXPECT_EQ(hits[i], 0);
      continue;
    }
    chi2 += (hits[i] - expected) * (hits[i] - expected) / expected;
  }
  // 179 degrees of freedom; the 0.999 quantile is about 249
  EXPECT_LT(chi2, 249.0);
}

TEST(Minibatch, PartialLastBatchIsKept) {
  const auto batches = shuffle_minibatches(300, 128, 5, 1);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 128u);
  EXPECT_EQ(batches[2].size(), 44u);
  std::vector<std::size_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 300; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(shuffle_minibatches(300, 128, 5, 1), batches);
  EXPECT_NE(shuffle_minibatches(300, 128, 5, 2), batches);
  EXPECT_THROW(shuffle_minibatches(10, 0, 5, 1), std::invalid_argument);
}

TEST(Batch, LayoutPerFusionMode) {
  const auto a = annotated_case("a", 10, 4);
  const auto set = build_balanced_dataset(std::vector<PreparedCase>{a}, 2);
  const std::vector<std::size_t> idx{3, 0};
  NetworkSpec spec;
  spec.fusion = FusionMode::ss;
  auto in = make_batch(set, idx, spec);
  ASSERT_EQ(in.streams.size(), 1u);
  EXPECT_EQ(in.streams[0].shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(in.streams[0].data()[kScalePatchValues + 7], set.patch(0)[7]);
  EXPECT_EQ(in.location.at(0, 5), set.location_of(3)[5]);

  spec.fusion = FusionMode::msef;
  in = make_batch(set, idx, spec);
  EXPECT_EQ(in.streams[0].shape(), (Shape{2, 6, 32, 32}));
  EXPECT_EQ(in.streams[0].data()[5 * 1024 + 1], set.patch(3)[2 * kScalePatchValues + 1024 + 1]);

  spec.fusion = FusionMode::msws;
  in = make_batch(set, idx, spec);
  ASSERT_EQ(in.streams.size(), 3u);
  EXPECT_EQ(in.streams[2].data()[kScalePatchValues + 9], set.patch(0)[2 * kScalePatchValues + 9]);
  Network<float> net(spec);
  EXPECT_NO_THROW(net.check_input(in));
}

TEST(Cache, RoundTripIsBitExact) {
  auto dir = locseg::testing::scratch_dir("lssc");
  const auto a = annotated_case("a", 12, 4), b = annotated_case("b", 5, 5);
  const auto set = build_balanced_dataset(std::vector<PreparedCase>{a, b}, 2);
  save_sample_cache(dir / "s.lssc", set);
  const std::size_t header = 4 + 4 + 8 + 4 + 12 + 4 + (4 + 1) * 2;
  const std::size_t record = kPatchValues * 4 + 8 * 4 + 1 + 4 + 8;
  EXPECT_EQ(fs::file_size(dir / "s.lssc"), header + set.size() * record);
  EXPECT_EQ(load_sample_cache(dir / "s.lssc"), set);
}

TEST(Cache, CorruptFilesAreRejected) {
  auto dir = locseg::testing::scratch_dir("lssc_bad");
  const auto a = annotated_case("a", 4, 4);
  save_sample_cache(dir / "s.lssc", build_balanced_dataset(std::vector<PreparedCase>{a}, 2));
  fs::resize_file(dir / "s.lssc", fs::file_size(dir / "s.lssc") - 3);
  EXPECT_THROW(load_sample_cache(dir / "s.lssc"), std::runtime_error);
  std::ofstream(dir / "bad.lssc") << "NOPE and more";
  EXPECT_THROW(load_sample_cache(dir / "bad.lssc"), std::runtime_error);
  EXPECT_THROW(load_sample_cache(dir / "missing.lssc"), std::runtime_error);
}
