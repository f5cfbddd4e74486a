#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fortress/metrics.hpp"
#include "fortress/rng.hpp"

using namespace fortress;

namespace {

LabelMap from_vector(const std::vector<std::int32_t>& v, std::size_t h, std::size_t w) {
  LabelMap m(1, h, w);
  m.data = v;
  return m;
}

LabelMap random_mask(Rng& rng, std::size_t k, std::size_t h, std::size_t w) {
  LabelMap m(1, h, w);
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng.below(k));
  return m;
}

// Per-class pixel sets, counted directly from the masks.
struct OracleScores {
  std::vector<double> iou, f1, recall, mcc;
  std::vector<bool> present, in_gt;
  double pixel_acc = 0, bal_acc = 0, fwiou = 0;
  double mean(const std::vector<double>& v, bool with_bg) const {
    double s = 0;
    int n = 0;
    for (std::size_t c = with_bg ? 0 : 1; c < v.size(); ++c)
      if (present[c]) {
        s += v[c];
        ++n;
      }
    return n ? s / n : 1.0;
  }
};

OracleScores oracle(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  const std::size_t n = gt.size();
  OracleScores o;
  bool all_correct = true;
  for (std::size_t i = 0; i < n; ++i) all_correct = all_correct && pred.data[i] == gt.data[i];
  double correct = 0, recall_sum = 0;
  int gt_classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::set<std::size_t> G, P;
    for (std::size_t i = 0; i < n; ++i) {
      if (gt.data[i] == static_cast<std::int32_t>(c)) G.insert(i);
      if (pred.data[i] == static_cast<std::int32_t>(c)) P.insert(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(G.begin(), G.end(), P.begin(), P.end(), std::back_inserter(inter));
    std::set_union(G.begin(), G.end(), P.begin(), P.end(), std::back_inserter(uni));
    const double tp = static_cast<double>(inter.size());
    const double fp = static_cast<double>(P.size()) - tp;
    const double fn = static_cast<double>(G.size()) - tp;
    const double tn = static_cast<double>(n - uni.size());
    correct += tp;
    o.present.push_back(!uni.empty());
    o.in_gt.push_back(!G.empty());
    o.iou.push_back(uni.empty() ? 0.0 : tp / static_cast<double>(uni.size()));
    o.f1.push_back(uni.empty() ? 0.0 : 2 * tp / (static_cast<double>(G.size()) + static_cast<double>(P.size())));
    o.recall.push_back(G.empty() ? 0.0 : tp / static_cast<double>(G.size()));
    if (!G.empty()) {
      recall_sum += o.recall.back();
      ++gt_classes;
      o.fwiou += static_cast<double>(G.size()) / static_cast<double>(n) * o.iou.back();
    }
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    o.mcc.push_back(den > 0 ? (tp * tn - fp * fn) / std::sqrt(den) : (all_correct ? 1.0 : 0.0));
  }
  o.pixel_acc = correct / static_cast<double>(n);
  o.bal_acc = recall_sum / gt_classes;
  return o;
}

}  // namespace

TEST(Confusion, AccumulateExamples) {
  ConfusionMatrix cm(3);
  Rng rng(1);
  const auto m = random_mask(rng, 3, 4, 4);
  accumulate(cm, m, m);
  std::uint64_t diag = 0;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 3; ++p) {
      if (g == p) diag += cm.at(g, p);
      else EXPECT_EQ(cm.at(g, p), 0u);
    }
  EXPECT_EQ(diag, 16u);

  ConfusionMatrix empty(3);
  accumulate(empty, LabelMap(0, 0, 0), LabelMap(0, 0, 0));
  EXPECT_EQ(empty, ConfusionMatrix(3));

  ConfusionMatrix two(2);
  accumulate(two, from_vector({1, 1}, 1, 2), from_vector({0, 1}, 1, 2));
  EXPECT_EQ(two.at(0, 1), 1u);
  EXPECT_EQ(two.at(1, 1), 1u);
  EXPECT_EQ(two.at(0, 0), 0u);
  EXPECT_EQ(two.total(), 2u);
}

TEST(Confusion, IgnoreLabelAndErrors) {
  ConfusionMatrix cm(2);
  accumulate(cm, from_vector({0, 1, 1}, 1, 3), from_vector({0, 255, 1}, 1, 3), 255);
  EXPECT_EQ(cm.total(), 2u);
  EXPECT_THROW(accumulate(cm, from_vector({0, 2}, 1, 2), from_vector({0, 1}, 1, 2)), DataError);
  EXPECT_THROW(accumulate(cm, from_vector({0, 1}, 1, 2), from_vector({0, -1}, 1, 2)), DataError);
  EXPECT_THROW(accumulate(cm, from_vector({0, 1}, 1, 2), from_vector({0, 1, 0}, 1, 3)), DataError);
  EXPECT_THROW(scores(ConfusionMatrix(2), true), ConfigError);
}

TEST(Scores, PerfectPredictionIsAllOnes) {
  Rng rng(2);
  const auto m = random_mask(rng, 4, 8, 8);
  ConfusionMatrix cm(4);
  accumulate(cm, m, m);
  for (bool bg : {true, false}) {
    const auto r = scores(cm, bg);
    EXPECT_EQ(r.miou, 1.0);
    EXPECT_EQ(r.f1, 1.0);
    EXPECT_EQ(r.pixel_acc, 1.0);
    EXPECT_EQ(r.bal_acc, 1.0);
    EXPECT_EQ(r.mean_mcc, 1.0);
    EXPECT_EQ(r.fwiou, 1.0);
  }
  // single class everywhere: MCC has a zero denominator but the answer is right
  ConfusionMatrix one(3);
  accumulate(one, LabelMap(1, 4, 4, 2), LabelMap(1, 4, 4, 2));
  const auto r = scores(one, true);
  EXPECT_EQ(r.per_class[2].mcc, 1.0);
  EXPECT_EQ(r.mean_mcc, 1.0);
  EXPECT_EQ(r.miou, 1.0);
}

TEST(Scores, HandCountedExample) {
  // 16 pixels, 4 of class 1 in gt; prediction marks 3 pixels class 1, 2 correct
  std::vector<std::int32_t> gt(16, 0), pred(16, 0);
  gt[0] = gt[1] = gt[2] = gt[3] = 1;
  pred[0] = pred[1] = pred[8] = 1;
  ConfusionMatrix cm(2);
  accumulate(cm, from_vector(pred, 4, 4), from_vector(gt, 4, 4));
  const auto r = scores(cm, true);
  EXPECT_DOUBLE_EQ(r.per_class[1].iou, 0.4);
  EXPECT_NEAR(r.per_class[1].f1, 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(r.per_class[1].f1, 0.5714, 1e-4);
  EXPECT_DOUBLE_EQ(r.pixel_acc, 13.0 / 16.0);
}

TEST(Scores, ZeroDenominatorMcc) {
  ConfusionMatrix cm(2);
  accumulate(cm, from_vector({0, 0}, 1, 2), from_vector({0, 1}, 1, 2));
  const auto r = scores(cm, true);
  EXPECT_EQ(r.per_class[0].mcc, 0.0);
  EXPECT_EQ(r.per_class[1].mcc, 0.0);
  EXPECT_EQ(r.mean_mcc, 0.0);
}

TEST(Scores, BackgroundExclusionAndFwiou) {
  ConfusionMatrix cm(3);
  accumulate(cm, from_vector({0, 0, 1, 2, 2, 1}, 2, 3), from_vector({0, 1, 1, 2, 0, 2}, 2, 3));
  const auto bg = scores(cm, true);
  const auto nobg = scores(cm, false);
  EXPECT_NEAR(bg.miou, (bg.per_class[0].iou + bg.per_class[1].iou + bg.per_class[2].iou) / 3, 1e-15);
  EXPECT_NEAR(nobg.miou, (bg.per_class[1].iou + bg.per_class[2].iou) / 2, 1e-15);
  EXPECT_EQ(bg.pixel_acc, nobg.pixel_acc);
  EXPECT_EQ(bg.fwiou, nobg.fwiou);
  EXPECT_EQ(bg.bal_acc, nobg.bal_acc);

  // one class fills the ground truth: FWIoU is that class's IoU
  ConfusionMatrix single(3);
  accumulate(single, from_vector({1, 1, 0, 2}, 2, 2), from_vector({1, 1, 1, 1}, 2, 2));
  const auto s = scores(single, true);
  EXPECT_DOUBLE_EQ(s.fwiou, s.per_class[1].iou);
  EXPECT_DOUBLE_EQ(s.bal_acc, 0.5);  // only class 1 is in the ground truth
}

TEST(Scores, MatchesBruteForceOracleOn200Pairs) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto gt = random_mask(rng, 3, 8, 8);
    const auto pred = random_mask(rng, 3, 8, 8);
    ConfusionMatrix cm(3);
    accumulate(cm, pred, gt);
    const auto o = oracle(pred, gt, 3);
    for (bool bg : {true, false}) {
      const auto r = scores(cm, bg);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(r.per_class[c].iou, o.iou[c]);
        EXPECT_EQ(r.per_class[c].f1, o.f1[c]);
        EXPECT_EQ(r.per_class[c].recall, o.recall[c]);
        EXPECT_EQ(r.per_class[c].mcc, o.mcc[c]);
      }
      EXPECT_EQ(r.miou, o.mean(o.iou, bg));
      EXPECT_EQ(r.f1, o.mean(o.f1, bg));
      EXPECT_EQ(r.mean_mcc, o.mean(o.mcc, bg));
      EXPECT_EQ(r.pixel_acc, o.pixel_acc);
      EXPECT_EQ(r.bal_acc, o.bal_acc);
      EXPECT_EQ(r.fwiou, o.fwiou);
    }
  }
}

TEST(Scores, BoundsAndPermutationInvariance) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    auto gt = random_mask(rng, k, 6, 6);
    auto pred = random_mask(rng, k, 6, 6);
    // bias the prediction towards the truth so scores spread out
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (rng.bernoulli(0.5)) pred.data[i] = gt.data[i];
    ConfusionMatrix cm(k);
    accumulate(cm, pred, gt);
    const auto r = scores(cm, true);
    for (double v : {r.miou, r.f1, r.pixel_acc, r.bal_acc, r.fwiou}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(r.mean_mcc, -1.0);
    EXPECT_LE(r.mean_mcc, 1.0);

    std::vector<std::int32_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = k - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    LabelMap pg = gt, pp = pred;
    for (auto& v : pg.data) v = perm[v];
    for (auto& v : pp.data) v = perm[v];
    ConfusionMatrix cp(k);
    accumulate(cp, pp, pg);
    const auto q = scores(cp, true);
    for (std::size_t c = 0; c < k; ++c) EXPECT_NEAR(q.per_class[perm[c]].iou, r.per_class[c].iou, 1e-15);
    EXPECT_NEAR(q.miou, r.miou, 1e-12);
    EXPECT_NEAR(q.f1, r.f1, 1e-12);
    EXPECT_NEAR(q.mean_mcc, r.mean_mcc, 1e-12);
    EXPECT_NEAR(q.fwiou, r.fwiou, 1e-12);
    EXPECT_EQ(q.pixel_acc, r.pixel_acc);
  }
}

TEST(Scores, PartitionedAccumulationIsAdditive) {
  Rng rng(5);
  const auto a = random_mask(rng, 3, 8, 8), b = random_mask(rng, 3, 8, 8);
  const auto c = random_mask(rng, 3, 8, 8), d = random_mask(rng, 3, 8, 8);
  ConfusionMatrix whole(3), left(3), right(3);
  accumulate(whole, a, b);
  accumulate(whole, c, d);
  accumulate(left, a, b);
  accumulate(right, c, d);
  right += left;
  EXPECT_EQ(right, whole);
}

TEST(Report, FixedKeys) {
  ConfusionMatrix cm(3);
  accumulate(cm, from_vector({0, 1, 2, 2}, 2, 2), from_vector({0, 1, 1, 2}, 2, 2));
  const auto j = metric_report(cm);
  for (const char* key : {"f1_bg", "f1_nobg", "miou_bg", "miou_nobg", "pixel_acc", "bal_acc", "mean_mcc", "fwiou"}) {
    ASSERT_TRUE(j.contains(key)) << key;
    EXPECT_TRUE(j[key].is_number()) << key;
  }
  EXPECT_EQ(j["pixel_acc"].get<double>(), 0.75);
  EXPECT_EQ(j["per_class"].size(), 3u);
}
