#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/error.hpp"
#include "cfu/types.hpp"
#include "cfu/vision.hpp"

namespace cfu::metrics {

// ---------------------------------------------------------------------------
// Combined count + class loss
// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
};

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

/// Probabilities over {bacteria, mold}.
struct ClassProbs {
  double bacteria = 0.5;
  double mold = 0.5;
};

inline double cross_entropy(ColonyClass truth, const ClassProbs& p) {
  require(truth == ColonyClass::bacteria || truth == ColonyClass::mold, "true_class", "must be bacteria or mold");
  const double q = truth == ColonyClass::bacteria ? p.bacteria : p.mold;
  return -std::log(std::max(q, 1e-15));
}

/// alpha * smoothL1(pred - true) + beta * CE(true_class, probs).
inline double eval_loss(double true_count, double pred_count, ColonyClass true_class, const ClassProbs& probs,
                        const LossWeights& w = {}) {
  require(w.alpha >= 0.0 && w.beta >= 0.0 && (w.alpha > 0.0 || w.beta > 0.0), "weights",
          "alpha and beta must be non-negative and not both zero");
  require(probs.bacteria >= 0.0 && probs.mold >= 0.0 && std::abs(probs.bacteria + probs.mold - 1.0) <= 1e-9,
          "class_probs", "must be a distribution summing to 1");
  double loss = w.alpha * smooth_l1(pred_count - true_count);
  if (w.beta > 0.0) loss += w.beta * cross_entropy(true_class, probs);
  return loss;
}

// ---------------------------------------------------------------------------
// Consensus gate
// ---------------------------------------------------------------------------

enum class ConsensusOutcome { auto_approve, escalate };

inline std::string_view to_string(ConsensusOutcome o) {
  return o == ConsensusOutcome::auto_approve ? "auto_approve" : "escalate";
}

inline ConsensusOutcome consensus_outcome_from_string(std::string_view s) {
  if (s == "auto_approve") return ConsensusOutcome::auto_approve;
  if (s == "escalate") return ConsensusOutcome::escalate;
  fail(ErrorCode::validation, "outcome: unknown consensus outcome '" + std::string(s) + "'");
}

inline constexpr double kDefaultDelta = 0.05;

struct ConsensusDecision {
  std::int64_t count_a = 0;
  std::int64_t count_b = 0;
  double relative_delta = 0.0;
  double delta_threshold = kDefaultDelta;
  ConsensusOutcome outcome = ConsensusOutcome::auto_approve;

  friend bool operator==(const ConsensusDecision&, const ConsensusDecision&) = default;
};

/// Relative agreement test: |a - b| / max(a, b, 1) <= delta approves.
inline ConsensusDecision consensus(std::int64_t count_a, std::int64_t count_b, double delta = kDefaultDelta) {
  require(count_a >= 0 && count_b >= 0, "count", "counts must be non-negative");
  require(std::isfinite(delta) && delta >= 0.0, "delta", "must be a finite non-negative tolerance");
  ConsensusDecision d;
  d.count_a = count_a;
  d.count_b = count_b;
  d.delta_threshold = delta;
  const auto diff = static_cast<double>(count_a > count_b ? count_a - count_b : count_b - count_a);
  d.relative_delta = diff / static_cast<double>(std::max<std::int64_t>({count_a, count_b, 1}));
  d.outcome = d.relative_delta <= delta ? ConsensusOutcome::auto_approve : ConsensusOutcome::escalate;
  return d;
}

inline nlohmann::json to_json(const ConsensusDecision& d) {
  return {{"count_a", d.count_a},
          {"count_b", d.count_b},
          {"relative_delta", d.relative_delta},
          {"delta_threshold", d.delta_threshold},
          {"outcome", std::string(to_string(d.outcome))}};
}

inline ConsensusDecision consensus_from_json(const nlohmann::json& j) {
  return {j.at("count_a").get<std::int64_t>(), j.at("count_b").get<std::int64_t>(),
          j.at("relative_delta").get<double>(), j.at("delta_threshold").get<double>(),
          consensus_outcome_from_string(j.at("outcome").get<std::string>())};
}

// ---------------------------------------------------------------------------
// Screening confusion (positive class = valid plate)
// ---------------------------------------------------------------------------

struct ScreenConfusion {
  std::uint64_t tp = 0;  // valid plate screened valid
  std::uint64_t fn = 0;  // valid plate screened invalid
  std::uint64_t fp = 0;  // invalid plate screened valid
  std::uint64_t tn = 0;  // invalid plate screened invalid
};

struct ScreenRates {
  double fnr = 0.0;
  double dr = 0.0;
  double fpr = 0.0;
  double npdr = 0.0;
};

inline ScreenRates screen_rates(const ScreenConfusion& c) {
  if (c.tp + c.fn == 0) fail(ErrorCode::insufficient_data, "screen_rates: no valid plates, DR/FNR undefined");
  if (c.fp + c.tn == 0) fail(ErrorCode::insufficient_data, "screen_rates: no invalid plates, FPR/NPDR undefined");
  const double pos = static_cast<double>(c.tp + c.fn);
  const double neg = static_cast<double>(c.fp + c.tn);
  ScreenRates r;
  r.dr = static_cast<double>(c.tp) / pos;
  r.fnr = static_cast<double>(c.fn) / pos;
  r.npdr = static_cast<double>(c.tn) / neg;
  r.fpr = static_cast<double>(c.fp) / neg;
  return r;
}

// ---------------------------------------------------------------------------
// Count validation (match / mismatch against adjudicated reference)
// ---------------------------------------------------------------------------

struct CountValidationRates {
  double approval_rate = 0.0;
  double verify_rate = 0.0;
  int approval_pct = 0;
  int verify_pct = 0;
  /// Set when match + mismatch exceeds total: the row is internally inconsistent.
  bool inconsistent = false;
};

inline int rounded_percent(double rate) { return static_cast<int>(std::lround(rate * 100.0)); }

/// approval = match / total; verify = mismatch / total. When `mismatch` is
/// omitted it is taken as total - match.
inline CountValidationRates count_validation_rates(std::int64_t match, std::int64_t total,
                                                   std::optional<std::int64_t> mismatch = std::nullopt) {
  require(total > 0, "total", "must be positive");
  require(match >= 0 && match <= total, "match", "must lie in [0, total]");
  const std::int64_t miss = mismatch.value_or(total - match);
  require(miss >= 0 && miss <= total, "mismatch", "must lie in [0, total]");
  CountValidationRates r;
  r.approval_rate = static_cast<double>(match) / static_cast<double>(total);
  r.verify_rate = static_cast<double>(miss) / static_cast<double>(total);
  r.approval_pct = rounded_percent(r.approval_rate);
  r.verify_pct = rounded_percent(r.verify_rate);
  r.inconsistent = match + miss > total;
  return r;
}

// ---------------------------------------------------------------------------
// Detection AP
// ---------------------------------------------------------------------------

struct DetectionScores {
  double map = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::uint64_t true_positives = 0;
  std::uint64_t detections = 0;
  std::uint64_t truths = 0;
};

/// Class-agnostic AP pooled over images. Detections are ranked by score
/// (ties: image order, then input order). Each detection claims the unmatched
/// truth in its image with the highest IoU >= iou_cut (ties: lower index).
/// AP is the all-point interpolated area under the precision-recall curve.
inline DetectionScores map_at_iou(std::span<const std::vector<vision::Box>> detections,
                                  std::span<const std::vector<vision::Box>> truths, double iou_cut = 0.5) {
  require(detections.size() == truths.size(), "detections", "need one detection list per truth list");
  struct Ranked {
    double score;
    std::size_t image;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  DetectionScores out;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    out.truths += truths[i].size();
    for (std::size_t j = 0; j < detections[i].size(); ++j) {
      const double s = detections[i][j].score;
      require(s >= 0.0 && s <= 1.0, "score", "must be in [0, 1]");
      ranked.push_back({s, i, j});
    }
  }
  out.detections = ranked.size();
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(truths.size());
  for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);

  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::uint64_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& det = detections[r.image][r.index];
    double best = -1.0;
    std::size_t best_t = 0;
    for (std::size_t t = 0; t < truths[r.image].size(); ++t) {
      if (used[r.image][t]) continue;
      const double o = vision::iou(det, truths[r.image][t]);
      if (o >= iou_cut && o > best) {
        best = o;
        best_t = t;
      }
    }
    if (best >= 0.0) {
      used[r.image][best_t] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(out.truths ? static_cast<double>(tp) / static_cast<double>(out.truths) : 0.0);
  }
  out.true_positives = tp;
  out.precision = out.detections ? static_cast<double>(tp) / static_cast<double>(out.detections) : 0.0;
  out.recall = out.truths ? static_cast<double>(tp) / static_cast<double>(out.truths) : 0.0;
  if (out.truths == 0 || ranked.empty()) return out;

  // Precision envelope from the right, then sum rectangles at recall steps.
  for (std::size_t k = precision.size() - 1; k > 0; --k) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    if (recall[k] > prev_recall) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
  }
  out.map = ap;
  return out;
}

// ---------------------------------------------------------------------------
// Classification metrics over {bacteria, mold}
// ---------------------------------------------------------------------------

struct BinaryCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

inline BinaryCounts class_counts(std::span<const ColonyClass> labels, std::span<const ColonyClass> preds,
                                 ColonyClass cls) {
  BinaryCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool t = labels[i] == cls;
    const bool p = preds[i] == cls;
    if (t && p) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
  }
  return c;
}

/// Unweighted mean of per-class F1 over bacteria and mold.
inline double balanced_f1(std::span<const ColonyClass> labels, std::span<const ColonyClass> preds) {
  require(labels.size() == preds.size(), "predictions", "must match labels in length");
  double sum = 0.0;
  for (auto cls : {ColonyClass::bacteria, ColonyClass::mold}) {
    const auto c = class_counts(labels, preds, cls);
    if (c.tp + c.fn == 0) {
      fail(ErrorCode::insufficient_data,
           "balanced_f1: class '" + std::string(to_string(cls)) + "' absent from labels, its F1 is undefined",
           {{"class", std::string(to_string(cls))}});
    }
    sum += 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  }
  return sum / 2.0;
}

/// Recall of `cls`.
inline double recall(std::span<const ColonyClass> labels, std::span<const ColonyClass> preds, ColonyClass cls) {
  require(labels.size() == preds.size(), "predictions", "must match labels in length");
  const auto c = class_counts(labels, preds, cls);
  if (c.tp + c.fn == 0) {
    fail(ErrorCode::insufficient_data, "recall: class '" + std::string(to_string(cls)) + "' absent from labels");
  }
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

/// Rank-based ROC-AUC: probability a random positive scores above a random
/// negative, ties counting one half.
inline double roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  require(scores.size() == positive.size(), "scores", "must match labels in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::uint64_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (positive[idx[k]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::uint64_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorCode::insufficient_data, "roc_auc: need both positive and negative samples");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// Expected calibration error over `bins` equal-width confidence bins; a
/// confidence of exactly 1 falls into the last bin.
inline double ece(std::span<const double> confidences, std::span<const bool> correct, int bins = 10) {
  require(confidences.size() == correct.size(), "correctness", "must match confidences in length");
  require(bins > 0, "bins", "must be positive");
  if (confidences.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), hit_sum(bins, 0.0);
  std::vector<std::uint64_t> count(bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    require(c >= 0.0 && c <= 1.0, "confidence", "must be in [0, 1]");
    const int b = std::min(static_cast<int>(c * bins), bins - 1);
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double m = static_cast<double>(count[b]);
    total += (m / n) * std::abs(hit_sum[b] / m - conf_sum[b] / m);
  }
  return total;
}

}  // namespace cfu::metrics
