#include "docfuse/calibration.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace docfuse;

namespace {

PredictionRecord rec(double confidence, bool correct, int64_t evidence_page = -1) {
  PredictionRecord r;
  r.confidence = confidence;
  r.correct = correct;
  r.evidence_page = evidence_page;
  return r;
}

TEST(Confidence, MinOfScores) {
  EXPECT_EQ(answer_confidence({0.9, 0.8, 0.95}), 0.8);
  EXPECT_EQ(answer_confidence({0.7}), 0.7);
  EXPECT_EQ(answer_confidence({1.0, 1.0}), 1.0);
}

TEST(Confidence, GeometricMeanFlag) {
  EXPECT_NEAR(answer_confidence({0.9, 0.4}, true), 0.6, 1e-15);
  EXPECT_NEAR(answer_confidence({0.5, 0.5, 0.5}, true), 0.5, 1e-15);
}

TEST(Confidence, BoundsAndErrors) {
  EXPECT_THROW(answer_confidence({}), ValidationError);
  EXPECT_THROW(answer_confidence({0.5, 0.0}), ValidationError);
  EXPECT_THROW(answer_confidence({1.2}), ValidationError);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s;
    const int n = 1 + static_cast<int>(rng.uniform_int(6));
    for (int i = 0; i < n; ++i) s.push_back(1.0 - rng.uniform() * 0.999);
    const double c = answer_confidence(s);
    for (double v : s) EXPECT_LE(c, v);
    EXPECT_NE(std::find(s.begin(), s.end(), c), s.end());
  }
}

TEST(Ece, FrozenValues) {
  std::vector<PredictionRecord> perfect{rec(1.0, true), rec(1.0, true)};
  EXPECT_EQ(ece(perfect), 0.0);
  std::vector<PredictionRecord> worst{rec(1.0, false), rec(1.0, false), rec(1.0, false)};
  EXPECT_EQ(ece(worst), 1.0);
  std::vector<PredictionRecord> hand{rec(0.9, true), rec(0.9, false), rec(0.3, false),
                                     rec(0.3, false)};
  EXPECT_NEAR(ece(hand), 0.35, 1e-15);
}

TEST(Ece, ZeroConfidenceJoinsFirstBin) {
  // A lone always-wrong zero-confidence record is perfectly calibrated;
  // a correct one is maximally off inside bin 1.
  EXPECT_EQ(ece({rec(0.0, false)}), 0.0);
  EXPECT_EQ(ece({rec(0.0, true)}), 1.0);
}

TEST(Ece, OneBinIsAccuracyMinusMeanConfidence) {
  Rng rng(11);
  std::vector<PredictionRecord> records;
  double conf_sum = 0.0;
  int64_t hits = 0;
  for (int i = 0; i < 37; ++i) {
    const double c = rng.uniform();
    const bool ok = rng.uniform() < 0.6;
    records.push_back(rec(c, ok));
    conf_sum += c;
    hits += ok ? 1 : 0;
  }
  const double expect =
      std::abs(static_cast<double>(hits) / 37.0 - conf_sum / 37.0);
  EXPECT_NEAR(ece(records, 1), expect, 1e-12);
}

TEST(Ece, PermutationInvariantAndBounded) {
  Rng rng(13);
  std::vector<PredictionRecord> records;
  for (int i = 0; i < 64; ++i) records.push_back(rec(rng.uniform(), rng.uniform() < 0.5));
  const double base = ece(records);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
  for (int t = 0; t < 5; ++t) {
    rng.shuffle(records);
    // Bin sums re-associate under permutation, so equality is up to rounding.
    EXPECT_NEAR(ece(records), base, 1e-12);
  }
}

TEST(Ece, ErrorsRejected) {
  EXPECT_THROW(ece({}), ValidationError);
  EXPECT_THROW(ece({rec(1.5, true)}), ValidationError);
  EXPECT_THROW(ece({rec(0.5, true)}, 0), ConfigError);
}

TEST(Ece, BernoulliSamplerIsCalibrated) {
  Rng rng(17);
  std::vector<PredictionRecord> records;
  for (int i = 0; i < 10000; ++i) {
    const double c = 1.0 - rng.uniform();  // (0, 1]
    records.push_back(rec(c, rng.uniform() < c));
  }
  EXPECT_LT(ece(records), 0.02);
  for (const auto& bin : calibration_plot_data(records, 10))
    EXPECT_LT(std::abs(bin.accuracy - bin.mean_confidence), 0.05) << "bin " << bin.bin;
}

// Independent selection-walk oracle: repeatedly pick the highest-confidence
// unused record, earliest input index first, and re-derive every risk.
double aurc_oracle(const std::vector<PredictionRecord>& records) {
  const size_t n = records.size();
  std::vector<bool> used(n, false);
  int64_t errors = 0;
  double risk_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    size_t pick = n;
    for (size_t j = 0; j < n; ++j)
      if (!used[j] && (pick == n || records[j].confidence > records[pick].confidence))
        pick = j;
    used[pick] = true;
    errors += records[pick].correct ? 0 : 1;
    risk_sum += static_cast<double>(errors) / static_cast<double>(i + 1);
  }
  return risk_sum / static_cast<double>(n);
}

TEST(RiskCoverage, FrozenValues) {
  std::vector<PredictionRecord> all_ok{rec(0.9, true), rec(0.5, true)};
  auto r = risk_coverage(all_ok);
  EXPECT_EQ(r.aurc, 0.0);
  for (const auto& p : r.curve) EXPECT_EQ(p.risk, 0.0);

  std::vector<PredictionRecord> all_bad{rec(0.9, false), rec(0.5, false)};
  EXPECT_EQ(risk_coverage(all_bad).aurc, 1.0);

  std::vector<PredictionRecord> hand{rec(0.9, true), rec(0.8, false), rec(0.6, true)};
  auto h = risk_coverage(hand);
  ASSERT_EQ(h.curve.size(), 3u);
  EXPECT_EQ(h.curve[0].risk, 0.0);
  EXPECT_EQ(h.curve[1].risk, 0.5);
  EXPECT_NEAR(h.curve[2].risk, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(h.aurc, (0.0 + 0.5 + 1.0 / 3.0) / 3.0, 1e-15);
  EXPECT_NEAR(h.aurc, 0.2778, 5e-5);
}

TEST(RiskCoverage, TiesKeepInputOrder) {
  auto a = risk_coverage({rec(0.5, false), rec(0.5, true)});
  EXPECT_EQ(a.curve[0].risk, 1.0);
  EXPECT_EQ(a.aurc, 0.75);
  auto b = risk_coverage({rec(0.5, true), rec(0.5, false)});
  EXPECT_EQ(b.curve[0].risk, 0.0);
  EXPECT_EQ(b.aurc, 0.25);
}

TEST(RiskCoverage, MatchesOracleOnSmallSets) {
  Rng rng(19);
  for (int t = 0; t < 200; ++t) {
    std::vector<PredictionRecord> records;
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    for (int i = 0; i < n; ++i) {
      // Coarse confidences make ties frequent.
      const double c = static_cast<double>(rng.uniform_int(5)) / 4.0;
      records.push_back(rec(c, rng.uniform() < 0.5));
    }
    EXPECT_EQ(risk_coverage(records).aurc, aurc_oracle(records)) << "trial " << t;
  }
}

TEST(RiskCoverage, PerfectSelectorMinimizesAurc) {
  // Three correct, three wrong; try every assignment of the confidence
  // multiset. The assignment giving correct records the top confidences
  // must be optimal, and its curve non-decreasing.
  std::vector<double> confs{0.9, 0.8, 0.7, 0.4, 0.3, 0.2};
  std::vector<bool> correct{true, true, true, false, false, false};
  std::vector<PredictionRecord> best_records;
  for (size_t i = 0; i < confs.size(); ++i)
    best_records.push_back(rec(confs[i], correct[i]));
  const double best = risk_coverage(best_records).aurc;
  auto curve = risk_coverage(best_records).curve;
  for (size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i].risk, curve[i - 1].risk);

  std::vector<double> perm = confs;
  std::sort(perm.begin(), perm.end());
  double min_seen = 1.0;
  do {
    std::vector<PredictionRecord> records;
    for (size_t i = 0; i < perm.size(); ++i) records.push_back(rec(perm[i], correct[i]));
    min_seen = std::min(min_seen, risk_coverage(records).aurc);
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_EQ(best, min_seen);
}

TEST(RiskCoverage, EmptyRejected) {
  EXPECT_THROW(risk_coverage({}), ValidationError);
}

TEST(PlotData, SingleRecordRow) {
  auto bins = calibration_plot_data({rec(1.0, true)}, 10);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].bin, 9);
  EXPECT_EQ(bins[0].mean_confidence, 1.0);
  EXPECT_EQ(bins[0].accuracy, 1.0);
  EXPECT_EQ(bins[0].count, 1);
  EXPECT_EQ(bins[0].hi, 1.0);
}

TEST(PlotData, ThresholdRuleReproducesStep) {
  std::vector<PredictionRecord> records;
  for (int b = 0; b < 10; ++b) {
    const double c = 0.05 + 0.1 * b;  // one bin-center record per bin
    records.push_back(rec(c, c > 0.5));
  }
  auto bins = calibration_plot_data(records, 10);
  ASSERT_EQ(bins.size(), 10u);
  for (const auto& bin : bins) {
    EXPECT_EQ(bin.count, 1);
    EXPECT_NEAR(bin.mean_confidence, 0.05 + 0.1 * bin.bin, 1e-15);
    EXPECT_EQ(bin.accuracy, bin.bin >= 5 ? 1.0 : 0.0);
  }
}

TEST(EvidenceReport, FrozenPartitions) {
  std::vector<PredictionRecord> single{rec(0.9, true, 0), rec(0.8, false, 0)};
  auto one = evidence_position_report(single);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].bucket, 0);
  EXPECT_EQ(one[0].accuracy, 0.5);
  EXPECT_EQ(one[0].count, 2);

  std::vector<PredictionRecord> spread;
  for (int64_t page = 0; page < 25; ++page)
    spread.push_back(rec(0.5, page % 5 == 0, page));  // first page of each bucket correct
  auto five = evidence_position_report(spread, 5);
  ASSERT_EQ(five.size(), 5u);
  for (int64_t b = 0; b < 5; ++b) {
    EXPECT_EQ(five[static_cast<size_t>(b)].bucket, b);
    EXPECT_EQ(five[static_cast<size_t>(b)].count, 5);
    EXPECT_NEAR(five[static_cast<size_t>(b)].accuracy, 0.2, 1e-15);
  }
}

TEST(EvidenceReport, SkipsUnannotatedAndRejectsNone) {
  std::vector<PredictionRecord> mixed{rec(0.9, true, 3), rec(0.8, false)};
  auto report = evidence_position_report(mixed, 5);
  ASSERT_EQ(report.size(), 1u);
  EXPECT_EQ(report[0].count, 1);
  EXPECT_THROW(evidence_position_report({rec(0.9, true), rec(0.8, false)}),
               ValidationError);
  EXPECT_THROW(evidence_position_report(mixed, 0), ConfigError);
}

}  // namespace
