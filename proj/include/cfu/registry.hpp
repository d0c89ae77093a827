#pragma once

// Bacteria/mold classifier registry: candidate models, stratified k-fold
// evaluation, deterministic promotion and live degradation monitoring.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/error.hpp"
#include "cfu/image.hpp"
#include "cfu/metrics.hpp"
#include "cfu/rng.hpp"
#include "cfu/types.hpp"
#include "cfu/vision.hpp"

namespace cfu::registry {

struct ColonyFeatures {
  double area = 0.0;
  double circularity = 1.0;
  double mean_intensity = 0.0;
  double intensity_variance = 0.0;
  double edge_density = 0.0;

  std::array<double, 5> as_array() const {
    return {area, circularity, mean_intensity, intensity_variance, edge_density};
  }
};

/// Gradient magnitude (central differences) above which a pixel counts as an edge.
inline constexpr double kEdgeGradient = 10.0;

/// Shape and texture descriptors of one segmented colony. Perimeter is the
/// crack length scaled by pi/4, which makes digital discs score close to 1.
inline ColonyFeatures colony_features(const GrayImage& img, const vision::Component& comp) {
  ColonyFeatures f;
  const auto n = comp.area();
  if (n == 0) return f;
  f.area = static_cast<double>(n);
  const auto box = comp.bbox();
  const int x0 = static_cast<int>(box.x_min), y0 = static_cast<int>(box.y_min);
  const int w = static_cast<int>(box.width()), h = static_cast<int>(box.height());
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
  for (const auto& p : comp.pixels) mask[static_cast<std::size_t>(p.y - y0) * w + (p.x - x0)] = 1;
  auto inside = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < w && y < h && mask[static_cast<std::size_t>(y) * w + x];
  };
  std::size_t cracks = 0, edges = 0;
  double sum = 0.0, sq = 0.0;
  for (const auto& p : comp.pixels) {
    const int lx = p.x - x0, ly = p.y - y0;
    cracks += !inside(lx - 1, ly) + !inside(lx + 1, ly) + !inside(lx, ly - 1) + !inside(lx, ly + 1);
    const double v = img.at(p.x, p.y);
    sum += v;
    sq += v * v;
    auto px = [&](int x, int y) {
      return static_cast<double>(img.at(std::clamp(x, 0, img.width - 1), std::clamp(y, 0, img.height - 1)));
    };
    const double gx = (px(p.x + 1, p.y) - px(p.x - 1, p.y)) / 2.0;
    const double gy = (px(p.x, p.y + 1) - px(p.x, p.y - 1)) / 2.0;
    if (std::hypot(gx, gy) >= kEdgeGradient) ++edges;
  }
  const double perimeter = static_cast<double>(cracks) * std::numbers::pi / 4.0;
  f.circularity = std::clamp(4.0 * std::numbers::pi * f.area / (perimeter * perimeter), 1e-6, 1.2);
  f.mean_intensity = sum / f.area;
  f.intensity_variance = std::max(0.0, sq / f.area - f.mean_intensity * f.mean_intensity);
  f.edge_density = static_cast<double>(edges) / f.area;
  return f;
}

struct LabeledSample {
  ColonyFeatures features;
  ColonyClass label = ColonyClass::bacteria;
};

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

class Model {
 public:
  virtual ~Model() = default;
  virtual double prob_mold(const ColonyFeatures& f) const = 0;

  ColonyClass predict(const ColonyFeatures& f) const {
    return prob_mold(f) >= 0.5 ? ColonyClass::mold : ColonyClass::bacteria;
  }
};

class Candidate {
 public:
  virtual ~Candidate() = default;
  virtual std::string id() const = 0;
  virtual std::shared_ptr<const Model> fit(std::span<const LabeledSample> train) const = 0;
};

namespace detail {

struct Standardizer {
  std::array<double, 5> mean{};
  std::array<double, 5> scale{1, 1, 1, 1, 1};

  static Standardizer fit(std::span<const LabeledSample> data) {
    Standardizer s;
    const double n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
    for (const auto& d : data) {
      const auto a = d.features.as_array();
      for (std::size_t k = 0; k < 5; ++k) s.mean[k] += a[k] / n;
    }
    std::array<double, 5> var{};
    for (const auto& d : data) {
      const auto a = d.features.as_array();
      for (std::size_t k = 0; k < 5; ++k) var[k] += (a[k] - s.mean[k]) * (a[k] - s.mean[k]) / n;
    }
    for (std::size_t k = 0; k < 5; ++k) s.scale[k] = var[k] > 1e-12 ? std::sqrt(var[k]) : 1.0;
    return s;
  }

  std::array<double, 5> apply(const ColonyFeatures& f) const {
    auto a = f.as_array();
    for (std::size_t k = 0; k < 5; ++k) a[k] = (a[k] - mean[k]) / scale[k];
    return a;
  }
};

inline bool is_mold(const LabeledSample& s) { return s.label == ColonyClass::mold; }

}  // namespace detail

/// One-feature threshold on area; leaf probabilities are smoothed mold
/// frequencies on each side of the cut.
class AreaStump final : public Candidate {
 public:
  std::string id() const override { return "area_stump"; }

  std::shared_ptr<const Model> fit(std::span<const LabeledSample> train) const override {
    struct Fitted final : Model {
      double cut = 0.0;
      double p_below = 0.5;
      double p_above = 0.5;
      double prob_mold(const ColonyFeatures& f) const override { return f.area > cut ? p_above : p_below; }
    };
    auto m = std::make_shared<Fitted>();
    std::vector<double> areas;
    for (const auto& s : train) areas.push_back(s.features.area);
    std::sort(areas.begin(), areas.end());
    areas.erase(std::unique(areas.begin(), areas.end()), areas.end());
    double best_score = -1.0;
    auto leaf_stats = [&](double cut) {
      double mb = 0, nb = 0, ma = 0, na = 0;
      for (const auto& s : train) {
        if (s.features.area > cut) {
          ++na;
          ma += detail::is_mold(s);
        } else {
          ++nb;
          mb += detail::is_mold(s);
        }
      }
      return std::array<double, 4>{mb, nb, ma, na};
    };
    const double total_mold = static_cast<double>(std::count_if(train.begin(), train.end(), detail::is_mold));
    const double total_bact = static_cast<double>(train.size()) - total_mold;
    std::vector<double> cuts;
    if (areas.size() < 2) cuts.push_back(areas.empty() ? 0.0 : areas.front());
    for (std::size_t i = 0; i + 1 < areas.size(); ++i) cuts.push_back((areas[i] + areas[i + 1]) / 2.0);
    for (double cut : cuts) {
      const auto [mb, nb, ma, na] = leaf_stats(cut);
      // Balanced accuracy, whichever side is called mold.
      const double tpr_above = total_mold > 0 ? ma / total_mold : 0.0;
      const double tnr_below = total_bact > 0 ? (nb - mb) / total_bact : 0.0;
      const double score = std::max(tpr_above + tnr_below, 2.0 - tpr_above - tnr_below) / 2.0;
      if (score > best_score) {
        best_score = score;
        m->cut = cut;
        m->p_below = (mb + 0.5) / (nb + 1.0);
        m->p_above = (ma + 0.5) / (na + 1.0);
      }
    }
    return m;
  }
};

/// Logistic regression on standardized features, fixed-step full-batch
/// gradient descent.
class LogisticScorer final : public Candidate {
 public:
  explicit LogisticScorer(int steps = 500, double step_size = 0.1) : steps_(steps), step_size_(step_size) {}
  std::string id() const override { return "logistic"; }

  std::shared_ptr<const Model> fit(std::span<const LabeledSample> train) const override {
    struct Fitted final : Model {
      detail::Standardizer std;
      std::array<double, 5> w{};
      double b = 0.0;
      double prob_mold(const ColonyFeatures& f) const override {
        const auto x = std.apply(f);
        double z = b;
        for (std::size_t k = 0; k < 5; ++k) z += w[k] * x[k];
        return 1.0 / (1.0 + std::exp(-z));
      }
    };
    auto m = std::make_shared<Fitted>();
    m->std = detail::Standardizer::fit(train);
    std::vector<std::array<double, 5>> xs;
    for (const auto& s : train) xs.push_back(m->std.apply(s.features));
    const double n = static_cast<double>(std::max<std::size_t>(train.size(), 1));
    for (int it = 0; it < steps_; ++it) {
      std::array<double, 5> gw{};
      double gb = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        double z = m->b;
        for (std::size_t k = 0; k < 5; ++k) z += m->w[k] * xs[i][k];
        const double err = 1.0 / (1.0 + std::exp(-z)) - (detail::is_mold(train[i]) ? 1.0 : 0.0);
        for (std::size_t k = 0; k < 5; ++k) gw[k] += err * xs[i][k] / n;
        gb += err / n;
      }
      for (std::size_t k = 0; k < 5; ++k) m->w[k] -= step_size_ * gw[k];
      m->b -= step_size_ * gb;
    }
    return m;
  }

 private:
  int steps_;
  double step_size_;
};

/// k-nearest-neighbour vote on standardized features (ties on distance
/// resolved by training order).
class NearestNeighbors final : public Candidate {
 public:
  explicit NearestNeighbors(std::size_t k = 3) : k_(k) {}
  std::string id() const override { return "knn" + std::to_string(k_); }

  std::shared_ptr<const Model> fit(std::span<const LabeledSample> train) const override {
    struct Fitted final : Model {
      detail::Standardizer std;
      std::vector<std::pair<std::array<double, 5>, bool>> points;
      std::size_t k = 3;
      double prob_mold(const ColonyFeatures& f) const override {
        const auto x = std.apply(f);
        std::vector<std::pair<double, std::size_t>> d;
        d.reserve(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < 5; ++j) s += (points[i].first[j] - x[j]) * (points[i].first[j] - x[j]);
          d.emplace_back(s, i);
        }
        const std::size_t kk = std::min(k, d.size());
        if (kk == 0) return 0.5;
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
        double votes = 0.0;
        for (std::size_t i = 0; i < kk; ++i) votes += points[d[i].second].second ? 1.0 : 0.0;
        return votes / static_cast<double>(kk);
      }
    };
    auto m = std::make_shared<Fitted>();
    m->std = detail::Standardizer::fit(train);
    m->k = k_;
    for (const auto& s : train) m->points.emplace_back(m->std.apply(s.features), detail::is_mold(s));
    return m;
  }

 private:
  std::size_t k_;
};

/// Fixed morphological rule: mold iff area > min_area and circularity < max_circularity.
class MorphologyRule final : public Candidate {
 public:
  MorphologyRule(double min_area = 600.0, double max_circularity = 0.9)
      : min_area_(min_area), max_circularity_(max_circularity) {}
  std::string id() const override { return "morph_rule"; }

  std::shared_ptr<const Model> model() const {
    struct Fixed final : Model {
      double min_area, max_circ;
      Fixed(double a, double c) : min_area(a), max_circ(c) {}
      double prob_mold(const ColonyFeatures& f) const override {
        return f.area > min_area && f.circularity < max_circ ? 0.9 : 0.1;
      }
    };
    return std::make_shared<Fixed>(min_area_, max_circularity_);
  }

  std::shared_ptr<const Model> fit(std::span<const LabeledSample>) const override { return model(); }

 private:
  double min_area_;
  double max_circularity_;
};

inline std::vector<std::shared_ptr<const Candidate>> default_candidates() {
  return {std::make_shared<AreaStump>(), std::make_shared<LogisticScorer>(), std::make_shared<NearestNeighbors>(3),
          std::make_shared<MorphologyRule>()};
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

inline constexpr int kFolds = 5;
inline constexpr std::size_t kMinPerClass = 10;

struct CandidateReport {
  std::string candidate_id;
  double balanced_f1 = 0.0;
  double recall = 0.0;  // mold recall over pooled held-out predictions
  double roc_auc = 0.0;
  double calibration_error = 0.0;
  double latency_us = 0.0;
  std::vector<double> fold_scores;
};

/// Stratified fold assignment: within each class, a seeded shuffle then
/// round-robin over folds.
inline std::vector<int> stratified_folds(std::span<const LabeledSample> data, int folds, std::uint64_t seed) {
  std::vector<int> fold(data.size(), 0);
  Rng rng(seed);
  for (auto cls : {ColonyClass::bacteria, ColonyClass::mold}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data[i].label == cls) idx.push_back(i);
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    }
    for (std::size_t i = 0; i < idx.size(); ++i) fold[idx[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  }
  return fold;
}

inline void require_class_support(std::span<const LabeledSample> data) {
  for (auto cls : {ColonyClass::bacteria, ColonyClass::mold}) {
    const auto n = std::count_if(data.begin(), data.end(), [&](const auto& s) { return s.label == cls; });
    if (static_cast<std::size_t>(n) < kMinPerClass) {
      fail(ErrorCode::insufficient_data,
           "class '" + std::string(to_string(cls)) + "' has " + std::to_string(n) + " samples, need at least " +
               std::to_string(kMinPerClass),
           {{"class", std::string(to_string(cls))}, {"samples", n}});
    }
  }
}

inline std::vector<CandidateReport> evaluate_candidates(std::span<const LabeledSample> data,
                                                        std::span<const std::shared_ptr<const Candidate>> candidates,
                                                        std::uint64_t seed = 0) {
  require_class_support(data);
  const auto fold = stratified_folds(data, kFolds, seed);
  std::vector<CandidateReport> reports;
  for (const auto& cand : candidates) {
    CandidateReport rep;
    rep.candidate_id = cand->id();
    std::vector<ColonyClass> all_labels, all_preds;
    std::vector<double> all_prob, all_conf;
    std::vector<bool> all_pos, all_correct;
    double predict_ns = 0.0;
    for (int f = 0; f < kFolds; ++f) {
      std::vector<LabeledSample> train;
      std::vector<std::size_t> held;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (fold[i] == f) held.push_back(i);
        else train.push_back(data[i]);
      }
      const auto model = cand->fit(train);
      std::vector<ColonyClass> labels, preds;
      for (auto i : held) {
        const auto t0 = std::chrono::steady_clock::now();
        const double p = model->prob_mold(data[i].features);
        predict_ns += static_cast<double>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
        const auto pred = p >= 0.5 ? ColonyClass::mold : ColonyClass::bacteria;
        labels.push_back(data[i].label);
        preds.push_back(pred);
        all_prob.push_back(p);
        all_pos.push_back(data[i].label == ColonyClass::mold);
        all_conf.push_back(std::max(p, 1.0 - p));
        all_correct.push_back(pred == data[i].label);
      }
      rep.fold_scores.push_back(metrics::balanced_f1(labels, preds));
      all_labels.insert(all_labels.end(), labels.begin(), labels.end());
      all_preds.insert(all_preds.end(), preds.begin(), preds.end());
    }
    double sum = 0.0;
    for (double s : rep.fold_scores) sum += s;
    rep.balanced_f1 = sum / static_cast<double>(rep.fold_scores.size());
    rep.recall = metrics::recall(all_labels, all_preds, ColonyClass::mold);
    // std::span<const bool> needs contiguous bool storage, which vector<bool> is not.
    const auto pos = std::make_unique<bool[]>(all_pos.size());
    const auto corr = std::make_unique<bool[]>(all_correct.size());
    std::copy(all_pos.begin(), all_pos.end(), pos.get());
    std::copy(all_correct.begin(), all_correct.end(), corr.get());
    rep.roc_auc = metrics::roc_auc(all_prob, std::span<const bool>(pos.get(), all_pos.size()));
    rep.calibration_error = metrics::ece(all_conf, std::span<const bool>(corr.get(), all_correct.size()));
    rep.latency_us = predict_ns / 1000.0 / static_cast<double>(std::max<std::size_t>(data.size(), 1));
    reports.push_back(std::move(rep));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Promotion
// ---------------------------------------------------------------------------

struct PromotionRecord {
  std::string candidate_id;
  std::string timestamp;
  CandidateReport report;
  std::string reason;
};

/// Ranking: higher balanced F1, then higher recall, then lower latency, then
/// candidate id. Total, so the winner does not depend on input order.
inline bool ranks_above(const CandidateReport& a, const CandidateReport& b) {
  if (a.balanced_f1 != b.balanced_f1) return a.balanced_f1 > b.balanced_f1;
  if (a.recall != b.recall) return a.recall > b.recall;
  if (a.latency_us != b.latency_us) return a.latency_us < b.latency_us;
  return a.candidate_id < b.candidate_id;
}

inline PromotionRecord promote(std::span<const CandidateReport> reports, const std::string& timestamp) {
  if (reports.empty()) fail(ErrorCode::validation, "reports: cannot promote from an empty report list");
  const CandidateReport* best = &reports.front();
  for (const auto& r : reports)
    if (ranks_above(r, *best)) best = &r;
  PromotionRecord rec;
  rec.candidate_id = best->candidate_id;
  rec.timestamp = timestamp;
  rec.report = *best;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "best balanced_f1=%.4f recall=%.4f latency_us=%.3f among %zu candidates",
                best->balanced_f1, best->recall, best->latency_us, reports.size());
  rec.reason = buf;
  return rec;
}

/// Replays a promotion log; the last record names the production model.
inline std::optional<std::string> current_model_id(std::span<const PromotionRecord> log) {
  if (log.empty()) return std::nullopt;
  return log.back().candidate_id;
}

inline nlohmann::json to_json(const CandidateReport& r) {
  return {{"candidate_id", r.candidate_id}, {"balanced_f1", r.balanced_f1},       {"recall", r.recall},
          {"roc_auc", r.roc_auc},           {"calibration_error", r.calibration_error},
          {"latency_us", r.latency_us},     {"fold_scores", r.fold_scores}};
}

inline CandidateReport report_from_json(const nlohmann::json& j) {
  CandidateReport r;
  r.candidate_id = j.at("candidate_id").get<std::string>();
  r.balanced_f1 = j.at("balanced_f1").get<double>();
  r.recall = j.at("recall").get<double>();
  r.roc_auc = j.at("roc_auc").get<double>();
  r.calibration_error = j.at("calibration_error").get<double>();
  r.latency_us = j.at("latency_us").get<double>();
  r.fold_scores = j.at("fold_scores").get<std::vector<double>>();
  return r;
}

inline nlohmann::json to_json(const PromotionRecord& p) {
  return {{"candidate_id", p.candidate_id}, {"timestamp", p.timestamp}, {"report", to_json(p.report)},
          {"reason", p.reason}};
}

inline PromotionRecord promotion_from_json(const nlohmann::json& j) {
  return {j.at("candidate_id").get<std::string>(), j.at("timestamp").get<std::string>(),
          report_from_json(j.at("report")), j.at("reason").get<std::string>()};
}

// ---------------------------------------------------------------------------
// Live monitoring
// ---------------------------------------------------------------------------

inline constexpr double kDegradationMargin = 0.10;
inline constexpr std::size_t kMinLiveWindow = 20;

struct LiveObservation {
  ColonyClass prediction = ColonyClass::bacteria;
  ColonyClass expert_label = ColonyClass::bacteria;
};

struct LiveStatus {
  bool degraded = false;
  double live_f1 = 0.0;
  double threshold = 0.0;
};

/// Degraded iff live balanced F1 < cv_f1 - margin. The comparison allows
/// 1e-12 of rounding slack so a live score sitting exactly on the boundary
/// is not flagged.
inline LiveStatus monitor_live(std::span<const LiveObservation> window, double promoted_cv_f1,
                               double margin = kDegradationMargin, std::size_t min_window = kMinLiveWindow) {
  if (window.size() < min_window) {
    fail(ErrorCode::insufficient_data, "monitor_live: window has " + std::to_string(window.size()) +
                                           " observations, need at least " + std::to_string(min_window));
  }
  std::vector<ColonyClass> labels, preds;
  for (const auto& o : window) {
    labels.push_back(o.expert_label);
    preds.push_back(o.prediction);
  }
  LiveStatus st;
  st.live_f1 = metrics::balanced_f1(labels, preds);
  st.threshold = promoted_cv_f1 - margin;
  st.degraded = st.live_f1 < st.threshold - 1e-12;
  return st;
}

}  // namespace cfu::registry
