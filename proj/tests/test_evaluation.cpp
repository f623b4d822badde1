#include <gtest/gtest.h>

#include "locseg/evaluation.hpp"
#include "test_support.hpp"

using namespace locseg;

namespace {

MaskVolume mask_from(const std::vector<std::uint8_t>& v) {
  MaskVolume m({v.size(), 1, 1}, {1, 1, 1});
  m.values = v;
  return m;
}

}  // namespace

TEST(Dice, Formula) {
  EXPECT_DOUBLE_EQ(dice({10, 5, 5, 80}), 20.0 / 30.0);
  EXPECT_EQ(dice({0, 4, 6, 10}), 0.0);
  EXPECT_EQ(dice({7, 0, 0, 3}), 1.0);
}

TEST(Dice, BothEmptyIsOneAndFlagged) {
  const ConfusionCounts c{0, 0, 0, 50};
  EXPECT_TRUE(both_empty(c));
  EXPECT_EQ(dice(c), 1.0);
  EXPECT_FALSE(both_empty({0, 1, 0, 50}));
}

TEST(Dice, CountsOnlyInsideBrain) {
  const auto pred = mask_from({1, 1, 0, 0, 1, 1});
  const auto ref = mask_from({1, 0, 1, 0, 1, 0});
  const auto brain = mask_from({1, 1, 1, 1, 0, 0});
  EXPECT_EQ(confusion_counts(pred, ref, brain), (ConfusionCounts{1, 1, 1, 1}));
}

TEST(Roc, ExampleIsThreeQuarters) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_EQ(roc_curve(s, y).az, 0.75);
  EXPECT_EQ(pairwise_auc(s, y), 0.75);
}

TEST(Roc, TrapezoidEqualsPairwiseExactly) {
  CounterRng rng(77, Purpose::test);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng.below(300);
    std::vector<float> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.4;
      // coarse scores force ties
      s[i] = static_cast<float>(std::round((rng.uniform() + 0.3 * y[i]) * 20) / 20);
    }
    y[0] = 0;
    y[1] = 1;
    const auto roc = roc_curve(s, y);
    ASSERT_EQ(roc.az, pairwise_auc(s, y)) << trial;
    for (std::size_t k = 1; k < roc.points.size(); ++k) {
      EXPECT_GE(roc.points[k].fpr, roc.points[k - 1].fpr);
      EXPECT_GE(roc.points[k].tpr, roc.points[k - 1].tpr);
      EXPECT_LT(roc.points[k].threshold, roc.points[k - 1].threshold);
    }
    EXPECT_EQ(roc.points.back().fpr, 1.0);
    EXPECT_EQ(roc.points.back().tpr, 1.0);
  }
}

TEST(Roc, PerfectReversedAndConstant) {
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_EQ(roc_curve(std::vector<double>{0, 1, 2, 3}, y).az, 1.0);
  EXPECT_EQ(roc_curve(std::vector<double>{3, 2, 1, 0}, y).az, 0.0);
  EXPECT_EQ(roc_curve(std::vector<double>{5, 5, 5, 5}, y).az, 0.5);
}

TEST(Roc, SingleClassAndNanAreRejected) {
  EXPECT_THROW(roc_curve(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}), std::invalid_argument);
  EXPECT_THROW(roc_curve(std::vector<double>{1, NAN}, std::vector<std::uint8_t>{0, 1}), std::invalid_argument);
}

TEST(Roc, CsvHasHeaderAndEveryPoint) {
  auto dir = locseg::testing::scratch_dir("roc_csv");
  const auto roc = roc_curve(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1});
  write_roc_csv(dir / "roc.csv", roc);
  std::ifstream in(dir / "roc.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "threshold,fpr,tpr");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, roc.points.size());
}

TEST(Threshold, StrictComparison) {
  ImageVolume p({3, 1, 1}, {1, 1, 1});
  p.values = {0.5f, 0.51f, 0.2f};
  EXPECT_EQ(apply_threshold(p, 0.5).values, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(Threshold, GridCountsMatchDirectThresholding) {
  CounterRng rng(5, Purpose::test);
  const Dims d{30, 20, 2};
  std::vector<ImageVolume> probs;
  std::vector<MaskVolume> refs, brains;
  for (int c = 0; c < 3; ++c) {
    ImageVolume p(d, {1, 1, 1});
    MaskVolume r(d, {1, 1, 1}), b(d, {1, 1, 1});
    for (std::size_t i = 0; i < p.size(); ++i) {
      // include exact grid values to exercise the strict comparison
      p[i] = rng.uniform() < 0.3 ? static_cast<float>(grid_threshold(rng.below(101))) : static_cast<float>(rng.uniform());
      r[i] = rng.uniform() < 0.2;
      b[i] = rng.uniform() < 0.9;
      if (!b[i]) r[i] = 0;
    }
    probs.push_back(p);
    refs.push_back(r);
    brains.push_back(b);
  }
  std::vector<ScoredCase> cases;
  for (int c = 0; c < 3; ++c) cases.push_back({&probs[c], &refs[c], &brains[c]});
  const auto grid = pooled_counts_on_grid(cases);
  for (std::size_t k = 0; k <= kThresholdSteps; ++k) {
    ConfusionCounts direct;
    for (int c = 0; c < 3; ++c) direct += confusion_counts(apply_threshold(probs[c], grid_threshold(k)), refs[c], brains[c]);
    ASSERT_EQ(grid[k], direct) << k;
  }
}

TEST(Threshold, MapEqualToReference) {
  const auto ref = mask_from({0, 1, 1, 0, 1, 0});
  ImageVolume p(ref.dims, ref.voxel_size);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = ref[i];
  const auto brain = mask_from({1, 1, 1, 1, 1, 1});
  const auto t = optimal_threshold({{&p, &ref, &brain}});
  // p > 0 already reproduces the reference, so the smallest grid point wins the tie
  EXPECT_EQ(t.threshold, 0.0);
  EXPECT_EQ(t.dice, 1.0);
  for (std::size_t k = 0; k < kThresholdSteps; ++k) EXPECT_EQ(t.dice_curve[k], 1.0);
  EXPECT_EQ(t.dice_curve[kThresholdSteps], 0.0);
}

TEST(Threshold, MapEqualToComplement) {
  const auto ref = mask_from({0, 1, 1, 0, 1, 0});
  ImageVolume p(ref.dims, ref.voxel_size);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0f - ref[i];
  const auto brain = mask_from({1, 1, 1, 1, 1, 1});
  const auto t = optimal_threshold({{&p, &ref, &brain}});
  EXPECT_EQ(t.threshold, 0.0);
  EXPECT_EQ(t.dice, 0.0);
}

TEST(Threshold, PicksInteriorOptimum) {
  const auto ref = mask_from({1, 1, 0, 0, 0});
  ImageVolume p(ref.dims, ref.voxel_size);
  p.values = {0.9f, 0.625f, 0.375f, 0.25f, 0.125f};
  const auto brain = mask_from({1, 1, 1, 1, 1});
  const auto t = optimal_threshold({{&p, &ref, &brain}});
  EXPECT_EQ(t.threshold, 0.38);
  EXPECT_EQ(t.dice, 1.0);
}

TEST(Bootstrap, IdenticalMethodsTieEverywhere) {
  std::vector<ConfusionCounts> a{{5, 2, 1, 100}, {3, 0, 4, 90}, {0, 1, 2, 80}};
  const auto r = bootstrap_compare(a, a, 100, 3);
  EXPECT_EQ(r.ties, 100u);
  EXPECT_EQ(r.p_value, 0.5);
  EXPECT_FALSE(r.below_resolution);
}

TEST(Bootstrap, DominatedMethodReportsSentinel) {
  std::vector<ConfusionCounts> a{{9, 1, 1, 100}, {8, 0, 1, 90}, {7, 1, 0, 80}, {6, 1, 1, 70}};
  std::vector<ConfusionCounts> b{{5, 5, 5, 96}, {4, 4, 5, 86}, {3, 5, 4, 76}, {2, 5, 5, 66}};
  const auto r = bootstrap_compare(a, b, 100, 3);
  EXPECT_EQ(r.b_better, 0u);
  EXPECT_TRUE(r.below_resolution);
  EXPECT_EQ(r.p_string(), "<0.01");
  const auto rev = bootstrap_compare(b, a, 100, 3);
  EXPECT_EQ(rev.p_value, 1.0);
  EXPECT_EQ(rev.p_string(), "1");
}

TEST(Bootstrap, ReplicatesArePooledDiceOfResampledCases) {
  std::vector<ConfusionCounts> a{{5, 2, 1, 100}, {3, 0, 4, 90}, {0, 1, 2, 80}};
  std::vector<ConfusionCounts> b{{4, 1, 2, 100}, {5, 3, 2, 90}, {1, 0, 1, 80}};
  const auto r = bootstrap_compare(a, b, 20, 9);
  EXPECT_EQ(r.dice_a, bootstrap_compare(a, b, 20, 9).dice_a);
  for (std::size_t rep = 0; rep < 20; ++rep) {
    CounterRng rng(9, Purpose::bootstrap, rep);
    ConfusionCounts pa, pb;
    for (int i = 0; i < 3; ++i) {
      const auto k = rng.below(3);
      pa += a[k];
      pb += b[k];
    }
    EXPECT_EQ(r.dice_a[rep], dice(pa));
    EXPECT_EQ(r.dice_b[rep], dice(pb));
  }
  EXPECT_THROW(bootstrap_compare(a, {b[0]}, 10, 1), std::invalid_argument);
}

TEST(Subsets, NestedPrefixes) {
  const auto s = nested_subsets(40, {1.0, 0.5, 0.25, 0.125, 0.0625}, 4);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].size(), 40u);
  EXPECT_EQ(s[1].size(), 20u);
  EXPECT_EQ(s[2].size(), 10u);
  EXPECT_EQ(s[3].size(), 5u);
  EXPECT_EQ(s[4].size(), 2u);
  for (std::size_t k = 1; k < s.size(); ++k)
    EXPECT_TRUE(std::includes(s[k - 1].begin(), s[k - 1].end(), s[k].begin(), s[k].end()));
  EXPECT_THROW(nested_subsets(10, {0.0625}, 4), std::invalid_argument);
}
