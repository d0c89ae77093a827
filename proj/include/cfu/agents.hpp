#pragma once

// The three stateless agents: a quality pre-screener and two counters built
// on disjoint decision logic (components + watershed vs. raw distance peaks).

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/error.hpp"
#include "cfu/image.hpp"
#include "cfu/registry.hpp"
#include "cfu/types.hpp"
#include "cfu/vision.hpp"

namespace cfu::agents {

enum class AgentKind { screener, counter_a, counter_b };

inline std::string_view to_string(AgentKind a) {
  switch (a) {
    case AgentKind::screener: return "screener";
    case AgentKind::counter_a: return "counter_a";
    case AgentKind::counter_b: return "counter_b";
  }
  return "screener";
}

inline AgentKind agent_from_string(std::string_view s) {
  if (s == "screener") return AgentKind::screener;
  if (s == "counter_a") return AgentKind::counter_a;
  if (s == "counter_b") return AgentKind::counter_b;
  fail(ErrorCode::validation, "agent: unknown agent '" + std::string(s) + "'", {{"field", "agent"}});
}

struct AgentVerdict {
  std::string plate_id;
  PlateQuality quality = PlateQuality::valid;
  std::uint32_t count = 0;
  std::string reason;
  AgentKind agent = AgentKind::screener;
  double elapsed_ms = 0.0;

  friend bool operator==(const AgentVerdict&, const AgentVerdict&) = default;
};

inline void validate(const AgentVerdict& v) {
  require(v.elapsed_ms >= 0.0, "elapsed_ms", "must be >= 0");
  if (v.quality == PlateQuality::invalid) {
    require(v.count == 0, "count", "must be 0 for an invalid plate");
    require(!v.reason.empty(), "reason", "must be non-empty for an invalid plate");
  }
}

inline nlohmann::json to_json(const AgentVerdict& v) {
  return {{"plate_id", v.plate_id},
          {"quality", std::string(to_string(v.quality))},
          {"count", v.count},
          {"reason", v.reason},
          {"agent", std::string(to_string(v.agent))},
          {"elapsed_ms", v.elapsed_ms}};
}

inline AgentVerdict verdict_from_json(const nlohmann::json& j) {
  AgentVerdict v;
  v.plate_id = j.at("plate_id").get<std::string>();
  v.quality = quality_from_string(j.at("quality").get<std::string>());
  v.count = j.at("count").get<std::uint32_t>();
  v.reason = j.at("reason").get<std::string>();
  v.agent = agent_from_string(j.at("agent").get<std::string>());
  v.elapsed_ms = j.at("elapsed_ms").get<double>();
  validate(v);
  return v;
}

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Screener
// ---------------------------------------------------------------------------

struct ScreenerConfig {
  double blur_min = 15.0;       // blur_metric below this is "blur"
  double glare_max = 0.05;      // glare_fraction above this is "glare"
  double speckle_max = 400.0;   // speckle_energy above this is "condensation"
  double contrast_min = 20.0;   // contrast below this is "low-contrast"

  friend bool operator==(const ScreenerConfig&, const ScreenerConfig&) = default;
};

inline void validate(const ScreenerConfig& c) {
  require(c.blur_min >= 0.0, "blur_min", "must be >= 0");
  require(c.glare_max >= 0.0 && c.glare_max <= 1.0, "glare_max", "must be in [0, 1]");
  require(c.speckle_max >= 0.0, "speckle_max", "must be >= 0");
  require(c.contrast_min >= 0.0 && c.contrast_min <= 255.0, "contrast_min", "must be in [0, 255]");
}

struct ScreenResult {
  AgentVerdict verdict;
  vision::QualityStats stats;
};

/// Reason of the first failing check, in order glare, low-contrast,
/// condensation, blur; nullopt when every check passes. Glare and a turbid
/// film also depress the sharpness metric, so the more specific causes are
/// reported first.
inline std::optional<std::string> failing_metric(const vision::QualityStats& s, const ScreenerConfig& c) {
  if (s.glare_fraction > c.glare_max) return "glare";
  if (s.contrast < c.contrast_min) return "low-contrast";
  if (s.speckle_energy > c.speckle_max) return "condensation";
  if (s.blur_metric < c.blur_min) return "blur";
  return std::nullopt;
}

inline ScreenResult screen(const std::string& plate_id, const GrayImage& img, const ScreenerConfig& cfg = {}) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  ScreenResult out;
  out.stats = vision::quality_stats(img);
  out.verdict.plate_id = plate_id;
  out.verdict.agent = AgentKind::screener;
  out.verdict.count = 0;
  if (auto why = failing_metric(out.stats, cfg)) {
    out.verdict.quality = PlateQuality::invalid;
    out.verdict.reason = *why;
  } else {
    out.verdict.quality = PlateQuality::valid;
    out.verdict.reason = "all quality checks passed";
  }
  out.verdict.elapsed_ms = detail::ms_since(t0);
  return out;
}

inline nlohmann::json to_json(const vision::QualityStats& s) {
  return {{"blur_metric", s.blur_metric},
          {"glare_fraction", s.glare_fraction},
          {"speckle_energy", s.speckle_energy},
          {"contrast", s.contrast}};
}

/// An image paired with the screener verdict that cleared it. Counters only
/// accept plates admitted through here.
class ScreenedPlate {
 public:
  static ScreenedPlate admit(const GrayImage& img, const AgentVerdict& verdict) {
    if (verdict.agent != AgentKind::screener || verdict.quality != PlateQuality::valid) {
      fail(ErrorCode::illegal_transition,
           "contract violation: counters require a plate screened valid (got " +
               std::string(to_string(verdict.agent)) + "/" + std::string(to_string(verdict.quality)) + ")",
           {{"plate_id", verdict.plate_id}});
    }
    return ScreenedPlate(img, verdict.plate_id);
  }

  const GrayImage& image() const { return *image_; }
  const std::string& plate_id() const { return plate_id_; }

 private:
  ScreenedPlate(const GrayImage& img, std::string id) : image_(&img), plate_id_(std::move(id)) {}
  const GrayImage* image_;
  std::string plate_id_;
};

// ---------------------------------------------------------------------------
// Counter A: threshold, components, watershed, scored boxes, soft-NMS
// ---------------------------------------------------------------------------

/// Share of the shorter image side treated as the plate interior by both counters.
inline constexpr double kCountRoiFraction = 0.44;

struct CounterAConfig {
  double binarize_fraction = 0.80;  // foreground: intensity < fraction * background median
  double roi_fraction = kCountRoiFraction;
  std::size_t min_area = 12;
  double seed_nms_radius = vision::kSeedNmsRadius;
  double min_seed_height = 2.0;     // px; watershed seeds lower than this are ignored
  double iou_threshold = 0.4;
  double score_floor = 0.05;
  /// Promoted registry model; the fixed morphological rule when empty.
  std::shared_ptr<const registry::Model> classifier;
};

inline void validate(const CounterAConfig& c) {
  require(c.binarize_fraction > 0.0 && c.binarize_fraction <= 1.0, "binarize_fraction", "must be in (0, 1]");
  require(c.roi_fraction > 0.0 && c.roi_fraction <= 0.5, "roi_fraction", "must be in (0, 0.5]");
  require(c.seed_nms_radius >= 0.0, "seed_nms_radius", "must be >= 0");
  require(c.min_seed_height >= 0.0, "min_seed_height", "must be >= 0");
  require(c.iou_threshold >= 0.0 && c.iou_threshold <= 1.0, "iou_threshold", "must be in [0, 1]");
  require(c.score_floor >= 0.0 && c.score_floor <= 1.0, "score_floor", "must be in [0, 1]");
}

struct Detection {
  vision::Component component;
  vision::Box box;
};

/// Detection stage of counter A without suppression or classification:
/// one entry per watershed piece that survives the area filter.
inline std::vector<Detection> detect_colonies(const GrayImage& img, const CounterAConfig& cfg) {
  const Disc roi = Disc::centered(img, cfg.roi_fraction);
  const double bg = vision::median_in_disc(img, roi);
  const int threshold = static_cast<int>(std::ceil(cfg.binarize_fraction * bg));
  std::vector<Detection> out;
  for (const auto& comp : vision::segment_components(img, threshold, roi)) {
    if (comp.area() < cfg.min_area) continue;
    for (auto& piece : vision::watershed_split(comp, cfg.seed_nms_radius, cfg.min_seed_height * cfg.min_seed_height)) {
      if (piece.area() < cfg.min_area) continue;
      Detection d;
      d.box = piece.bbox();
      d.box.score = bg > 0.0 ? std::clamp((bg - piece.mean_intensity(img)) / bg, 0.0, 1.0) : 0.0;
      d.component = std::move(piece);
      out.push_back(std::move(d));
    }
  }
  return out;
}

struct PrimaryCount {
  AgentVerdict verdict;
  std::vector<vision::Box> boxes;
};

inline PrimaryCount count_primary(const ScreenedPlate& plate, const CounterAConfig& cfg = {}) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const GrayImage& img = plate.image();
  vision::validate_image(img);
  static const auto fallback = registry::MorphologyRule().model();
  const auto& model = cfg.classifier ? cfg.classifier : fallback;

  std::vector<vision::Box> boxes;
  for (auto& d : detect_colonies(img, cfg)) {
    d.box.cls = model->predict(registry::colony_features(img, d.component));
    boxes.push_back(d.box);
  }
  PrimaryCount out;
  out.boxes = vision::soft_nms(std::move(boxes), cfg.iou_threshold, cfg.score_floor);
  out.verdict.plate_id = plate.plate_id();
  out.verdict.quality = PlateQuality::valid;
  out.verdict.agent = AgentKind::counter_a;
  out.verdict.count = static_cast<std::uint32_t>(out.boxes.size());
  out.verdict.reason =
      detail::fmt("components+watershed bin=%.2f min_area=%.0f soft-nms iou=%.2f", cfg.binarize_fraction,
                  static_cast<double>(cfg.min_area), cfg.iou_threshold);
  out.verdict.elapsed_ms = detail::ms_since(t0);
  return out;
}

// ---------------------------------------------------------------------------
// Counter B: distance-transform peaks
// ---------------------------------------------------------------------------

struct CounterBConfig {
  double binarize_fraction = 0.85;
  double roi_fraction = kCountRoiFraction;
  double peak_height = 2.5;  // px of distance to the nearest background pixel
  double nms_radius = 3.0;

  friend bool operator==(const CounterBConfig&, const CounterBConfig&) = default;
};

inline void validate(const CounterBConfig& c) {
  require(c.binarize_fraction > 0.0 && c.binarize_fraction <= 1.0, "binarize_fraction", "must be in (0, 1]");
  require(c.roi_fraction > 0.0 && c.roi_fraction <= 0.5, "roi_fraction", "must be in (0, 0.5]");
  require(c.peak_height >= 0.0, "peak_height", "must be >= 0");
  require(c.nms_radius >= 0.0, "nms_radius", "must be >= 0");
}

inline AgentVerdict count_secondary(const ScreenedPlate& plate, const CounterBConfig& cfg = {}) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const GrayImage& img = plate.image();
  vision::validate_image(img);
  const Disc roi = Disc::centered(img, cfg.roi_fraction);
  const double bg = vision::median_in_disc(img, roi);
  const int threshold = static_cast<int>(std::ceil(cfg.binarize_fraction * bg));
  std::vector<std::uint8_t> mask(img.size(), 0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      mask[static_cast<std::size_t>(y) * img.width + x] = roi.contains_pixel(x, y) && img.at(x, y) < threshold;
  const auto dist = vision::squared_distance_transform(mask, img.width, img.height);
  const auto peaks = vision::find_peaks(dist, img.width, img.height, cfg.peak_height * cfg.peak_height, cfg.nms_radius);

  AgentVerdict v;
  v.plate_id = plate.plate_id();
  v.quality = PlateQuality::valid;
  v.agent = AgentKind::counter_b;
  v.count = static_cast<std::uint32_t>(peaks.size());
  char buf[64];
  std::snprintf(buf, sizeof(buf), "dt-peaks h=%g", cfg.peak_height);
  v.reason = buf;
  v.elapsed_ms = detail::ms_since(t0);
  return v;
}

// ---------------------------------------------------------------------------
// Training data for the registry
// ---------------------------------------------------------------------------

struct TruthColony {
  double x, y, radius;
  ColonyClass cls;
};

/// Labels counter A detections by the ground-truth colony whose disc
/// contains the detection centroid; unmatched detections are skipped.
inline std::vector<registry::LabeledSample> labeled_samples(const GrayImage& img,
                                                            const std::vector<TruthColony>& truth,
                                                            const CounterAConfig& cfg = {}) {
  std::vector<registry::LabeledSample> out;
  for (const auto& d : detect_colonies(img, cfg)) {
    const auto [cx, cy] = d.component.centroid();
    for (const auto& t : truth) {
      if (std::hypot(cx - t.x, cy - t.y) < t.radius) {
        out.push_back({registry::colony_features(img, d.component), t.cls});
        break;
      }
    }
  }
  return out;
}

}  // namespace cfu::agents
