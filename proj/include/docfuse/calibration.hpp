#pragma once
// Confidence aggregation and calibration reports. An answer's confidence is
// the minimum of its per-token scores; calibration quality is summarized by
// equal-width-bin ECE, a risk-coverage curve with its area, plot-ready bin
// rows, and accuracy bucketed by evidence page position.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "docfuse/common.hpp"

namespace docfuse {

struct PredictionRecord {
  std::vector<int32_t> answer_tokens;
  std::vector<double> token_scores;
  double confidence = 0.0;
  bool correct = false;
  int64_t evidence_page = -1;  // negative when unknown
  int64_t doc_pages = -1;
};

// Minimum of the per-token scores; the geometric mean is available for
// comparison. Scores must lie in (0, 1].
inline double answer_confidence(const std::vector<double>& token_scores,
                                bool geometric_mean = false) {
  if (token_scores.empty())
    throw ValidationError("confidence of an empty score list is undefined");
  for (double s : token_scores)
    if (!(s > 0.0 && s <= 1.0))
      throw ValidationError("token score " + std::to_string(s) + " outside (0, 1]");
  if (geometric_mean) {
    double log_sum = 0.0;
    for (double s : token_scores) log_sum += std::log(s);
    return std::exp(log_sum / static_cast<double>(token_scores.size()));
  }
  return *std::min_element(token_scores.begin(), token_scores.end());
}

namespace detail {

// Right-closed equal-width bins ((k-1)/n, k/n]; confidence 0 joins the
// first bin.
inline int64_t confidence_bin(double confidence, int64_t num_bins) {
  const int64_t idx =
      static_cast<int64_t>(std::ceil(confidence * static_cast<double>(num_bins))) - 1;
  return std::clamp<int64_t>(idx, 0, num_bins - 1);
}

inline void check_confidences(const std::vector<PredictionRecord>& records,
                              const char* op) {
  if (records.empty()) throw ValidationError(std::string(op) + " of an empty record set");
  for (const auto& r : records)
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0))
      throw ValidationError("record confidence " + std::to_string(r.confidence) +
                            " outside [0, 1]");
}

}  // namespace detail

// Expected calibration error: sum over bins of (bin mass) * |accuracy -
// mean confidence|. Empty bins contribute nothing.
inline double ece(const std::vector<PredictionRecord>& records, int64_t num_bins = 10) {
  if (num_bins < 1) throw ConfigError("ece needs num_bins >= 1");
  detail::check_confidences(records, "ece");
  std::vector<int64_t> count(static_cast<size_t>(num_bins), 0), hits(count);
  std::vector<double> conf_sum(static_cast<size_t>(num_bins), 0.0);
  for (const auto& r : records) {
    const auto b = static_cast<size_t>(detail::confidence_bin(r.confidence, num_bins));
    count[b] += 1;
    hits[b] += r.correct ? 1 : 0;
    conf_sum[b] += r.confidence;
  }
  const double n = static_cast<double>(records.size());
  double total = 0.0;
  for (size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0) continue;
    const double acc = static_cast<double>(hits[b]) / static_cast<double>(count[b]);
    const double mean_conf = conf_sum[b] / static_cast<double>(count[b]);
    total += (static_cast<double>(count[b]) / n) * std::abs(acc - mean_conf);
  }
  return total;
}

struct RiskCoveragePoint {
  double coverage = 0.0;
  double risk = 0.0;
};

struct RiskCoverageResult {
  std::vector<RiskCoveragePoint> curve;  // one point per coverage i/N
  double aurc = 0.0;
};

// Records ranked by confidence descending (stable in input order on ties);
// risk at coverage i/N is the error rate among the top i. AURC is the
// unweighted mean of the N risks.
inline RiskCoverageResult risk_coverage(const std::vector<PredictionRecord>& records) {
  detail::check_confidences(records, "risk_coverage");
  const int64_t n = static_cast<int64_t>(records.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return records[static_cast<size_t>(a)].confidence >
           records[static_cast<size_t>(b)].confidence;
  });
  RiskCoverageResult out;
  int64_t errors = 0;
  double risk_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    errors += records[static_cast<size_t>(order[static_cast<size_t>(i)])].correct ? 0 : 1;
    const double risk = static_cast<double>(errors) / static_cast<double>(i + 1);
    out.curve.push_back({static_cast<double>(i + 1) / static_cast<double>(n), risk});
    risk_sum += risk;
  }
  out.aurc = risk_sum / static_cast<double>(n);
  return out;
}

struct CalibrationBin {
  int64_t bin = 0;          // index into the num_bins partition
  double lo = 0.0, hi = 0.0;  // bin interval (lo, hi]
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  int64_t count = 0;
};

// Populated bins only, ready for a reliability plot.
inline std::vector<CalibrationBin> calibration_plot_data(
    const std::vector<PredictionRecord>& records, int64_t num_bins = 10) {
  if (num_bins < 1) throw ConfigError("calibration plot needs num_bins >= 1");
  detail::check_confidences(records, "calibration_plot_data");
  std::vector<int64_t> count(static_cast<size_t>(num_bins), 0), hits(count);
  std::vector<double> conf_sum(static_cast<size_t>(num_bins), 0.0);
  for (const auto& r : records) {
    const auto b = static_cast<size_t>(detail::confidence_bin(r.confidence, num_bins));
    count[b] += 1;
    hits[b] += r.correct ? 1 : 0;
    conf_sum[b] += r.confidence;
  }
  std::vector<CalibrationBin> out;
  for (int64_t b = 0; b < num_bins; ++b) {
    const auto bi = static_cast<size_t>(b);
    if (count[bi] == 0) continue;
    CalibrationBin row;
    row.bin = b;
    row.lo = static_cast<double>(b) / static_cast<double>(num_bins);
    row.hi = static_cast<double>(b + 1) / static_cast<double>(num_bins);
    row.mean_confidence = conf_sum[bi] / static_cast<double>(count[bi]);
    row.accuracy = static_cast<double>(hits[bi]) / static_cast<double>(count[bi]);
    row.count = count[bi];
    out.push_back(row);
  }
  return out;
}

struct EvidenceBucket {
  int64_t bucket = 0;  // pages [bucket*size, (bucket+1)*size)
  double accuracy = 0.0;
  int64_t count = 0;
};

// Mean correctness grouped by evidence page bucket; records without a page
// annotation are skipped.
inline std::vector<EvidenceBucket> evidence_position_report(
    const std::vector<PredictionRecord>& records, int64_t bucket_pages = 5) {
  if (bucket_pages < 1) throw ConfigError("bucket_pages must be >= 1");
  std::map<int64_t, std::pair<int64_t, int64_t>> buckets;  // bucket -> (hits, count)
  for (const auto& r : records) {
    if (r.evidence_page < 0) continue;
    auto& [hits, count] = buckets[r.evidence_page / bucket_pages];
    hits += r.correct ? 1 : 0;
    count += 1;
  }
  if (buckets.empty())
    throw ValidationError("no record carries an evidence page annotation");
  std::vector<EvidenceBucket> out;
  for (const auto& [bucket, agg] : buckets)
    out.push_back({bucket, static_cast<double>(agg.first) / static_cast<double>(agg.second),
                   agg.second});
  return out;
}

}  // namespace docfuse
