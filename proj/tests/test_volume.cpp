#include <gtest/gtest.h>

#include <fstream>

#include "locseg/volume.hpp"
#include "test_support.hpp"

using namespace locseg;

namespace {

CaseRecord tiny_case(const std::string& id, std::uint64_t seed) {
  const Dims d{6, 5, 3};
  const Spacing s{1.0, 1.2, 5.0};
  CaseRecord c;
  c.case_id = id;
  c.flair = ImageVolume(d, s);
  c.t1 = ImageVolume(d, s);
  c.brain_mask = MaskVolume(d, s);
  c.annotation = MaskVolume(d, s);
  c.ventricle_left = MaskVolume(d, s);
  c.ventricle_right = MaskVolume(d, s);
  CounterRng rng(seed, Purpose::test);
  for (std::size_t i = 0; i < c.flair.size(); ++i) {
    c.flair[i] = static_cast<float>(rng.uniform(0, 100));
    c.t1[i] = static_cast<float>(rng.uniform(0, 100));
    const auto xyz = c.flair.coords(i);
    c.brain_mask[i] = xyz[0] > 0 && xyz[0] < 5 ? 1 : 0;
  }
  c.annotation(2, 2, 1) = 1;
  c.ventricle_left(1, 2, 1) = 1;
  c.ventricle_right(3, 2, 1) = 1;
  return c;
}

}  // namespace

TEST(Volume, IndexIsXFastest) {
  ImageVolume v({4, 3, 2}, {1, 1, 1});
  EXPECT_EQ(v.index(1, 0, 0), 1u);
  EXPECT_EQ(v.index(0, 1, 0), 4u);
  EXPECT_EQ(v.index(0, 0, 1), 12u);
  EXPECT_EQ(v.coords(v.index(3, 2, 1)), (std::array<std::size_t, 3>{3, 2, 1}));
}

TEST(Volume, CaseRoundTripIsBitExact) {
  auto dir = locseg::testing::scratch_dir("case_roundtrip");
  const auto c = tiny_case("c0", 1);
  save_case(dir / "c0", c);
  const auto back = load_case(dir / "c0");
  EXPECT_EQ(back.case_id, "c0");
  EXPECT_EQ(back.flair, c.flair);
  EXPECT_EQ(back.t1, c.t1);
  EXPECT_EQ(back.brain_mask, c.brain_mask);
  EXPECT_EQ(back.annotation, c.annotation);
  EXPECT_EQ(back.ventricle_left, c.ventricle_left);
  EXPECT_EQ(back.ventricle_right, c.ventricle_right);
  EXPECT_FALSE(back.location_features.has_value());
}

TEST(Volume, NonBinaryMaskIsRejected) {
  auto c = tiny_case("c0", 2);
  c.brain_mask[7] = 2;
  try {
    validate_case(c);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("non-binary"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("index 7"), std::string::npos);
  }
}

TEST(Volume, AnnotationOutsideMaskNamesVoxel) {
  auto c = tiny_case("c0", 3);
  c.annotation(0, 1, 2) = 1;
  const auto idx = c.annotation.index(0, 1, 2);
  try {
    validate_case(c);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("index " + std::to_string(idx)), std::string::npos);
  }
}

TEST(Volume, GridMismatchIsRejected) {
  auto c = tiny_case("c0", 4);
  c.t1 = ImageVolume({6, 5, 2}, {1, 1, 1});
  EXPECT_THROW(validate_case(c), std::invalid_argument);
}

TEST(Volume, MissingAndTruncatedFilesHaveDistinctDiagnostics) {
  auto dir = locseg::testing::scratch_dir("case_files");
  save_case(dir / "c0", tiny_case("c0", 5));
  fs::remove(dir / "c0" / "t1.f32");
  try {
    load_case(dir / "c0");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing file"), std::string::npos);
  }
  std::ofstream(dir / "c0" / "t1.f32", std::ios::binary) << "abc";
  try {
    load_case(dir / "c0");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("dim mismatch"), std::string::npos);
  }
}

TEST(Volume, LocationFeaturesOutOfRangeAreRejected) {
  auto c = tiny_case("c0", 6);
  LocationFeatureSet set;
  for (auto& f : set) f = ImageVolume(c.dims(), c.voxel_size(), 0.5f);
  c.location_features = set;
  EXPECT_NO_THROW(validate_case(c));
  (*c.location_features)[3][c.flair.index(2, 2, 1)] = 1.5f;
  EXPECT_THROW(validate_case(c), std::invalid_argument);
  // Outside the brain mask the range is not enforced.
  (*c.location_features)[3][c.flair.index(2, 2, 1)] = 0.5f;
  (*c.location_features)[3][c.flair.index(0, 0, 0)] = 1.5f;
  EXPECT_NO_THROW(validate_case(c));
}

TEST(Normalize, ExampleValues) {
  ImageVolume v({3, 1, 1}, {1, 1, 1});
  v.values = {10.0f, 50.0f, 30.0f};
  MaskVolume m({3, 1, 1}, {1, 1, 1}, 1);
  const auto n = normalize_intensities(v, m);
  EXPECT_EQ(n[2], 0.5f);
  EXPECT_EQ(n[1], 1.0f);
  EXPECT_EQ(n[0], 0.0f);
}

TEST(Normalize, ConstantVolumeMapsToZero) {
  ImageVolume v({4, 1, 1}, {1, 1, 1}, 7.0f);
  MaskVolume m({4, 1, 1}, {1, 1, 1}, 1);
  for (float x : normalize_intensities(v, m).values) EXPECT_EQ(x, 0.0f);
}

TEST(Normalize, OutsideMaskIsClamped) {
  ImageVolume v({4, 1, 1}, {1, 1, 1});
  v.values = {-100.0f, 0.0f, 10.0f, 500.0f};
  MaskVolume m({4, 1, 1}, {1, 1, 1});
  m.values = {0, 1, 1, 0};
  const auto n = normalize_intensities(v, m);
  EXPECT_EQ(n.values, (std::vector<float>{0.0f, 0.0f, 1.0f, 1.0f}));
}

TEST(Manifest, RoundTripAndResolve) {
  auto dir = locseg::testing::scratch_dir("manifest");
  CohortManifest m{{"cases/a", Split::train}, {"/abs/b", Split::test}};
  write_manifest(dir / "manifest.json", m);
  EXPECT_EQ(read_manifest(dir / "manifest.json"), m);
  EXPECT_EQ(resolve_case_path(dir / "manifest.json", m[0]), dir / "cases/a");
  EXPECT_EQ(resolve_case_path(dir / "manifest.json", m[1]), fs::path("/abs/b"));
}

TEST(Manifest, DuplicateCaseIdsAreRejected) {
  auto dir = locseg::testing::scratch_dir("manifest_dup");
  save_case(dir / "a", tiny_case("same", 1));
  save_case(dir / "b", tiny_case("same", 2));
  write_manifest(dir / "manifest.json", {{"a", Split::train}, {"b", Split::test}});
  EXPECT_THROW(load_cohort(dir / "manifest.json"), std::runtime_error);
  EXPECT_EQ(load_cohort(dir / "manifest.json", Split::test).size(), 1u);
}

TEST(Split, TenCasesEightOneOne) {
  CohortManifest m;
  for (int i = 0; i < 10; ++i) m.push_back({"c" + std::to_string(i), Split::train});
  const auto s = split_cohort(m, {0.8, 0.1, 0.1}, 3);
  std::array<int, 3> counts{};
  for (const auto& e : s) ++counts[static_cast<int>(e.split)];
  EXPECT_EQ(counts, (std::array<int, 3>{8, 1, 1}));
  EXPECT_EQ(split_cohort(m, {0.8, 0.1, 0.1}, 3), s);
}

TEST(Split, AllTrain) {
  CohortManifest m;
  for (int i = 0; i < 7; ++i) m.push_back({"c" + std::to_string(i), Split::test});
  for (const auto& e : split_cohort(m, {1.0, 0.0, 0.0}, 9)) EXPECT_EQ(e.split, Split::train);
}

TEST(Split, SixtyCasesFortyTenTen) {
  CohortManifest m;
  for (int i = 0; i < 60; ++i) m.push_back({"c" + std::to_string(i), Split::train});
  const auto s = split_cohort(m, {4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0}, 11);
  std::array<int, 3> counts{};
  for (const auto& e : s) ++counts[static_cast<int>(e.split)];
  EXPECT_EQ(counts, (std::array<int, 3>{40, 10, 10}));
}

TEST(Split, BadFractionsAreRejected) {
  CohortManifest m{{"a", Split::train}};
  EXPECT_THROW(split_cohort(m, {0.5, 0.1, 0.1}, 1), std::invalid_argument);
  EXPECT_THROW(split_cohort(m, {1.2, -0.1, -0.1}, 1), std::invalid_argument);
  EXPECT_THROW(split_cohort({}, {1.0, 0.0, 0.0}, 1), std::invalid_argument);
}
