#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "groundseg/metrics.hpp"

using namespace groundseg;

namespace {

// Mask with exactly `count` leading pixels (row-major) set.
BinaryMask first_n(int h, int w, int count) {
  BinaryMask m(h, w);
  for (int i = 0; i < count; ++i) m.set(i / w, i % w);
  return m;
}

// Pair with prescribed intersection and union on a 1 x (U) strip.
EvalPair pair_with(int inter, int uni, ConceptFamily c = ConceptFamily::entities) {
  const int w = std::max(uni, 1);
  BinaryMask gt(1, w);
  BinaryMask pred(1, w);
  for (int i = 0; i < inter; ++i) {
    gt.set(0, i);
    pred.set(0, i);
  }
  // remaining union pixels go to the prediction only
  for (int i = inter; i < uni; ++i) pred.set(0, i);
  return EvalPair{"p", c, gt, pred};
}

struct PixelCounts {
  double inter = 0;
  double uni = 0;
};

PixelCounts brute_counts(const BinaryMask& a, const BinaryMask& b) {
  PixelCounts pc;
  for (int r = 0; r < a.height(); ++r) {
    for (int c = 0; c < a.width(); ++c) {
      const bool x = a.at(r, c);
      const bool y = b.at(r, c);
      if (x && y) pc.inter += 1;
      if (x || y) pc.uni += 1;
    }
  }
  return pc;
}

}  // namespace

TEST(Giou, PerfectAndMean) {
  const auto perfect = EvalPair{"a", ConceptFamily::entities, first_n(3, 3, 4), first_n(3, 3, 4)};
  EXPECT_DOUBLE_EQ(giou({perfect}), 100.0);
  EXPECT_DOUBLE_EQ(giou({perfect, pair_with(1, 2)}), 75.0);
  EXPECT_THROW((void)giou({}), Error);
}

TEST(Giou, EmptyGroundTruthConvention) {
  const EvalPair neg_ok{"n", ConceptFamily::entities, BinaryMask(4, 4), BinaryMask(4, 4)};
  EXPECT_DOUBLE_EQ(giou({neg_ok, pair_with(1, 2)}), 75.0);
  const EvalPair neg_bad{"n", ConceptFamily::entities, BinaryMask(4, 4), first_n(4, 4, 1)};
  EXPECT_DOUBLE_EQ(giou({neg_bad}), 0.0);
}

TEST(Ciou, DivergesFromGiou) {
  const std::vector<EvalPair> pairs{pair_with(4, 4), pair_with(50, 100)};
  EXPECT_NEAR(ciou(pairs), 5400.0 / 104.0, 1e-12);
  EXPECT_NEAR(ciou(pairs), 51.92, 0.01);
  EXPECT_DOUBLE_EQ(giou(pairs), 75.0);
}

TEST(Ciou, DegenerateCases) {
  EXPECT_DOUBLE_EQ(ciou({pair_with(4, 4)}), 100.0);
  const EvalPair empty{"e", ConceptFamily::entities, BinaryMask(3, 3), BinaryMask(3, 3)};
  EXPECT_DOUBLE_EQ(ciou({empty, empty}), 100.0);
  EXPECT_THROW((void)ciou({}), Error);
}

TEST(Metrics, MatchBruteForceOracle) {
  std::mt19937 rng(2024);
  std::uniform_int_distribution<int> side(1, 64);
  std::vector<EvalPair> pairs;
  double oracle_iou_sum = 0;
  double oracle_inter = 0;
  double oracle_union = 0;
  for (int i = 0; i < 200; ++i) {
    const int h = side(rng);
    const int w = side(rng);
    std::bernoulli_distribution pa(std::uniform_real_distribution<double>(0, 0.6)(rng));
    std::bernoulli_distribution pb(std::uniform_real_distribution<double>(0, 0.6)(rng));
    BinaryMask a(h, w);
    BinaryMask b(h, w);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (pa(rng)) a.set(r, c);
        if (pb(rng)) b.set(r, c);
      }
    }
    const auto pc = brute_counts(a, b);
    oracle_iou_sum += pc.uni == 0 ? 1.0 : pc.inter / pc.uni;
    oracle_inter += pc.inter;
    oracle_union += pc.uni;
    pairs.push_back({"r" + std::to_string(i), kAllConcepts[static_cast<std::size_t>(i % 5)], a, b});
  }
  EXPECT_NEAR(giou(pairs) / 100.0, oracle_iou_sum / 200.0, 1e-9);
  EXPECT_NEAR(ciou(pairs) / 100.0, oracle_inter / oracle_union, 1e-9);
}

TEST(Metrics, PermutationInvariantAndEqualUnionIdentity) {
  std::vector<EvalPair> pairs{pair_with(3, 10), pair_with(7, 10), pair_with(10, 10), pair_with(0, 10)};
  const double g = giou(pairs);
  const double c = ciou(pairs);
  EXPECT_NEAR(g, c, 1e-12);
  std::reverse(pairs.begin(), pairs.end());
  EXPECT_DOUBLE_EQ(giou(pairs), g);
  EXPECT_DOUBLE_EQ(ciou(pairs), c);
}

TEST(Report, SingleConceptBucketEqualsOverall) {
  const std::vector<EvalPair> pairs{pair_with(1, 2, ConceptFamily::physics_safety),
                                    pair_with(3, 4, ConceptFamily::physics_safety)};
  const auto r = per_concept_report(pairs);
  ASSERT_EQ(r.per_concept_giou.size(), 1U);
  EXPECT_DOUBLE_EQ(r.per_concept_giou.at(ConceptFamily::physics_safety), r.overall_giou);
  EXPECT_DOUBLE_EQ(r.per_concept_ciou.at(ConceptFamily::physics_safety), r.overall_ciou);
  EXPECT_FALSE(r.per_concept_giou.contains(ConceptFamily::entities));
}

TEST(Report, OverallIsSampleWeighted) {
  // three entity pairs at IoU 0.8, one spatial pair at 0.6 -> 75, not 70
  std::vector<EvalPair> pairs{pair_with(4, 5), pair_with(4, 5), pair_with(4, 5),
                              pair_with(3, 5, ConceptFamily::spatial_layout)};
  const auto r = per_concept_report(pairs);
  EXPECT_NEAR(r.per_concept_giou.at(ConceptFamily::entities), 80.0, 1e-12);
  EXPECT_NEAR(r.per_concept_giou.at(ConceptFamily::spatial_layout), 60.0, 1e-12);
  EXPECT_NEAR(r.overall_giou, 75.0, 1e-12);
  double weighted = 0;
  for (const auto& [c, v] : r.per_concept_giou) weighted += v * static_cast<double>(r.per_concept_n.at(c));
  EXPECT_NEAR(weighted / static_cast<double>(r.n), r.overall_giou, 1e-12);
}

TEST(Report, ColumnOrderIsFixed) {
  std::vector<EvalPair> pairs;
  for (auto it = kAllConcepts.rbegin(); it != kAllConcepts.rend(); ++it) pairs.push_back(pair_with(1, 1, *it));
  const auto r = per_concept_report(pairs);
  const auto j = report_to_json(r);
  std::vector<std::string> keys;
  for (const auto& [k, _] : j.at("columns").items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"All", "Ent.", "Spat.", "Rel.", "Aff.", "Phys."}));
  const auto table = report_to_table(r, "test");
  const auto header = table.substr(0, table.find('\n'));
  std::size_t last = 0;
  for (const auto& k : keys) {
    const auto at = header.find(k, last);
    ASSERT_NE(at, std::string::npos) << k;
    last = at;
  }
}
