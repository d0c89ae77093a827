#pragma once

// Pipeline configuration and its plain-text key = value format:
//
//   # comment
//   consensus.delta = 0.05
//   counter_a.binarize_fraction = 0.8
//
// Blank lines and everything after '#' are ignored. Keys are dotted names;
// an unknown key or an unparsable value is a validation error naming the key.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cfu/agents.hpp"
#include "cfu/error.hpp"
#include "cfu/metrics.hpp"

namespace cfu {

struct PipelineConfig {
  agents::ScreenerConfig screener;
  agents::CounterAConfig counter_a;
  agents::CounterBConfig counter_b;
  double delta = metrics::kDefaultDelta;
  metrics::LossWeights loss;
  double latency_budget_ms = 10000.0;
  double degradation_margin = 0.10;
  std::size_t live_window = 20;
  bool fsync = true;
  std::string token;
};

inline void validate(const PipelineConfig& c) {
  agents::validate(c.screener);
  agents::validate(c.counter_a);
  agents::validate(c.counter_b);
  require(c.delta >= 0.0, "consensus.delta", "must be >= 0");
  require(c.loss.alpha >= 0.0 && c.loss.beta >= 0.0 && (c.loss.alpha > 0.0 || c.loss.beta > 0.0), "loss",
          "weights must be >= 0 and not both zero");
  require(c.latency_budget_ms >= 0.0, "pipeline.latency_budget_ms", "must be >= 0");
  require(c.degradation_margin >= 0.0 && c.degradation_margin <= 1.0, "registry.degradation_margin",
          "must be in [0, 1]");
  require(c.live_window >= 1, "registry.live_window", "must be >= 1");
}

namespace detail {

struct ConfigField {
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end || !std::isfinite(out)) {
    fail(ErrorCode::validation, key + ": expected a number, got '" + v + "'", {{"field", key}});
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    fail(ErrorCode::validation, key + ": expected a non-negative integer, got '" + v + "'", {{"field", key}});
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::validation, key + ": expected true or false, got '" + v + "'", {{"field", key}});
}

/// Shortest text that parses back to the same double.
inline std::string show(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

#define CFU_DOUBLE_FIELD(name, member)                                                              \
  {name, {[](PipelineConfig& c, const std::string& v) { c.member = parse_double(name, v); },       \
          [](const PipelineConfig& c) { return show(c.member); }}}
#define CFU_SIZE_FIELD(name, member)                                                                \
  {name, {[](PipelineConfig& c, const std::string& v) { c.member = parse_size(name, v); },         \
          [](const PipelineConfig& c) { return std::to_string(c.member); }}}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields{
      CFU_DOUBLE_FIELD("screener.blur_min", screener.blur_min),
      CFU_DOUBLE_FIELD("screener.glare_max", screener.glare_max),
      CFU_DOUBLE_FIELD("screener.speckle_max", screener.speckle_max),
      CFU_DOUBLE_FIELD("screener.contrast_min", screener.contrast_min),
      CFU_DOUBLE_FIELD("counter_a.binarize_fraction", counter_a.binarize_fraction),
      CFU_DOUBLE_FIELD("counter_a.roi_fraction", counter_a.roi_fraction),
      CFU_SIZE_FIELD("counter_a.min_area", counter_a.min_area),
      CFU_DOUBLE_FIELD("counter_a.seed_nms_radius", counter_a.seed_nms_radius),
      CFU_DOUBLE_FIELD("counter_a.min_seed_height", counter_a.min_seed_height),
      CFU_DOUBLE_FIELD("counter_a.iou_threshold", counter_a.iou_threshold),
      CFU_DOUBLE_FIELD("counter_a.score_floor", counter_a.score_floor),
      CFU_DOUBLE_FIELD("counter_b.binarize_fraction", counter_b.binarize_fraction),
      CFU_DOUBLE_FIELD("counter_b.roi_fraction", counter_b.roi_fraction),
      CFU_DOUBLE_FIELD("counter_b.peak_height", counter_b.peak_height),
      CFU_DOUBLE_FIELD("counter_b.nms_radius", counter_b.nms_radius),
      CFU_DOUBLE_FIELD("consensus.delta", delta),
      CFU_DOUBLE_FIELD("loss.alpha", loss.alpha),
      CFU_DOUBLE_FIELD("loss.beta", loss.beta),
      CFU_DOUBLE_FIELD("pipeline.latency_budget_ms", latency_budget_ms),
      CFU_DOUBLE_FIELD("registry.degradation_margin", degradation_margin),
      CFU_SIZE_FIELD("registry.live_window", live_window),
      {"store.fsync",
       {[](PipelineConfig& c, const std::string& v) { c.fsync = parse_bool("store.fsync", v); },
        [](const PipelineConfig& c) { return std::string(c.fsync ? "true" : "false"); }}},
      {"gateway.token",
       {[](PipelineConfig& c, const std::string& v) { c.token = v; },
        [](const PipelineConfig& c) { return c.token; }}},
  };
  return fields;
}

#undef CFU_DOUBLE_FIELD
#undef CFU_SIZE_FIELD

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Applies every assignment in `text` on top of `base`, then validates.
inline PipelineConfig parse_config(std::string_view text, PipelineConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::validation, "config line " + std::to_string(lineno) + ": expected 'key = value'",
           {{"line", lineno}});
    }
    const auto key = detail::trim(std::string_view(body).substr(0, eq));
    const auto value = detail::trim(std::string_view(body).substr(eq + 1));
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) {
      fail(ErrorCode::validation, key + ": unknown configuration key", {{"field", key}, {"line", lineno}});
    }
    it->second.set(base, value);
  }
  validate(base);
  return base;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::not_found, "config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key in sorted order; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const PipelineConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) {
    if (key == "gateway.token") continue;  // never echoed
    out += key + " = " + field.get(c) + "\n";
  }
  return out;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, field] : detail::config_fields()) {
    if (key != "gateway.token") j[key] = field.get(c);
  }
  return j;
}

}  // namespace cfu
