#pragma once

// Run-level evaluation report: counting/detection, screening confusion and
// count validation, as JSON and as fixed-width text tables.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/metrics.hpp"
#include "cfu/orchestrator.hpp"

namespace cfu::report {

using Json = nlohmann::json;

struct PlateRecord {
  orchestrator::PlateState state;
  std::optional<orchestrator::Reference> reference;
};

/// Adjudicated count: the expert's when one exists, otherwise the
/// synthetic reference.
inline std::optional<std::uint32_t> reference_count(const PlateRecord& r) {
  if (r.state.expert) return r.state.expert->final_count;
  if (r.reference) return r.reference->true_count;
  return std::nullopt;
}

inline std::optional<bool> reference_valid(const PlateRecord& r) {
  if (r.state.expert) return r.state.expert->final_quality == PlateQuality::valid;
  if (r.reference) return r.reference->valid;
  return std::nullopt;
}

inline Json rates_or_null(std::int64_t match, std::int64_t total) {
  if (total == 0) return nullptr;
  const auto r = metrics::count_validation_rates(match, total);
  return {{"match", match},
          {"mismatch", total - match},
          {"total", total},
          {"approval_rate", r.approval_rate},
          {"verify_rate", r.verify_rate},
          {"approval_pct", r.approval_pct},
          {"verify_pct", r.verify_pct}};
}

inline Json build(const std::vector<PlateRecord>& plates) {
  using orchestrator::State;
  Json out;
  out["plates"] = plates.size();

  // Counting and detection
  Json counting = Json::object();
  for (auto kind : {agents::AgentKind::counter_a, agents::AgentKind::counter_b}) {
    std::int64_t n = 0, exact = 0;
    double abs_err = 0.0;
    for (const auto& p : plates) {
      const auto* v = p.state.verdict_of(kind);
      const auto ref = reference_count(p);
      if (!v || !ref) continue;
      ++n;
      exact += v->count == *ref;
      abs_err += std::abs(static_cast<double>(v->count) - *ref);
    }
    counting[std::string(agents::to_string(kind))] =
        n == 0 ? Json(nullptr)
               : Json{{"plates", n}, {"exact", exact}, {"exact_rate", static_cast<double>(exact) / n},
                      {"mae", abs_err / static_cast<double>(n)}};
  }
  std::vector<std::vector<vision::Box>> dets, truths;
  for (const auto& p : plates) {
    if (!p.reference || !p.state.verdict_of(agents::AgentKind::counter_a)) continue;
    dets.push_back(p.state.boxes);
    truths.push_back(p.reference->boxes);
  }
  if (dets.empty()) {
    counting["detection"] = nullptr;
  } else {
    const auto d = metrics::map_at_iou(dets, truths);
    counting["detection"] = {{"map50", d.map},          {"precision", d.precision},
                             {"recall", d.recall},      {"true_positives", d.true_positives},
                             {"detections", d.detections}, {"truths", d.truths}, {"plates", dets.size()}};
  }
  out["counting"] = counting;

  // Screening confusion, positive class = valid plate
  metrics::ScreenConfusion c;
  for (const auto& p : plates) {
    const auto truth = reference_valid(p);
    const auto* s = p.state.verdict_of(agents::AgentKind::screener);
    if (!truth || !s) continue;
    const bool said_valid = s->quality == PlateQuality::valid;
    if (*truth) (said_valid ? c.tp : c.fn)++;
    else (said_valid ? c.fp : c.tn)++;
  }
  Json screening{{"tp", c.tp}, {"fn", c.fn}, {"fp", c.fp}, {"tn", c.tn},
                 {"fnr", nullptr}, {"dr", nullptr}, {"fpr", nullptr}, {"npdr", nullptr}};
  if (c.tp + c.fn > 0) {
    screening["fnr"] = static_cast<double>(c.fn) / static_cast<double>(c.tp + c.fn);
    screening["dr"] = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  }
  if (c.fp + c.tn > 0) {
    screening["fpr"] = static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
    screening["npdr"] = static_cast<double>(c.tn) / static_cast<double>(c.fp + c.tn);
  }
  out["screening"] = screening;

  // Count validation
  Json validation = Json::object();
  for (auto kind : {agents::AgentKind::counter_a, agents::AgentKind::counter_b}) {
    std::int64_t match = 0, total = 0;
    for (const auto& p : plates) {
      const auto* v = p.state.verdict_of(kind);
      const auto ref = reference_count(p);
      if (!v || !ref) continue;
      ++total;
      match += v->count == *ref;
    }
    validation[std::string(agents::to_string(kind))] = rates_or_null(match, total);
  }
  std::int64_t agreed = 0, decided = 0;
  for (const auto& p : plates) {
    if (!p.state.decision) continue;
    ++decided;
    agreed += p.state.timestamp_of(State::auto_approved).has_value();
  }
  validation["consensus"] = rates_or_null(agreed, decided);
  out["validation"] = validation;
  return out;
}

namespace detail {

inline std::string num(const Json& j, const char* fmt = "%.4f") {
  if (j.is_null()) return "-";
  char buf[32];
  if (j.is_number_integer() || j.is_number_unsigned()) {
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(j.get<std::int64_t>()));
  } else {
    std::snprintf(buf, sizeof(buf), fmt, j.get<double>());
  }
  return buf;
}

inline std::string row(std::initializer_list<std::string> cells, int width = 14) {
  std::string out;
  for (const auto& c : cells) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-*s", width, c.c_str());
    out += buf;
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out + "\n";
}

inline Json get(const Json& j, const char* key) { return j.is_object() && j.contains(key) ? j.at(key) : Json(nullptr); }

}  // namespace detail

inline std::string render_text(const Json& r) {
  using detail::get;
  using detail::num;
  using detail::row;
  std::string out;
  out += "Counting (plates with a reference count)\n";
  out += row({"agent", "plates", "exact", "exact_rate", "mae"});
  for (const char* k : {"counter_a", "counter_b"}) {
    const auto c = get(r.at("counting"), k);
    out += row({k, num(get(c, "plates")), num(get(c, "exact")), num(get(c, "exact_rate")), num(get(c, "mae"))});
  }
  const auto d = get(r.at("counting"), "detection");
  out += row({"detector", "map50", "precision", "recall"});
  out += row({"counter_a", num(get(d, "map50")), num(get(d, "precision")), num(get(d, "recall"))});
  out += "\nScreening (positive = valid plate)\n";
  const auto& s = r.at("screening");
  out += row({"tp", "fn", "fp", "tn", "fnr", "dr", "fpr", "npdr"}, 9);
  out += row({num(s.at("tp")), num(s.at("fn")), num(s.at("fp")), num(s.at("tn")), num(s.at("fnr"), "%.2f"),
              num(s.at("dr"), "%.2f"), num(s.at("fpr"), "%.2f"), num(s.at("npdr"), "%.2f")},
             9);
  out += "\nCount validation\n";
  out += row({"source", "total", "match", "mismatch", "approval%", "verify%"});
  for (const char* k : {"counter_a", "counter_b", "consensus"}) {
    const auto v = get(r.at("validation"), k);
    out += row({k, num(get(v, "total")), num(get(v, "match")), num(get(v, "mismatch")), num(get(v, "approval_pct")),
                num(get(v, "verify_pct"))});
  }
  return out;
}

/// Report over one run, or over every plate when `run_id` is empty.
inline Json for_run(const orchestrator::Orchestrator& orch, const std::string& run_id = {}) {
  std::vector<PlateRecord> records;
  for (const auto& [id, p] : orch.snapshot()) {
    if (!run_id.empty() && p.run_id != run_id) continue;
    records.push_back({p, orch.reference(id)});
  }
  return build(records);
}

}  // namespace cfu::report
