#pragma once

// Per-plate workflow as an event-sourced state machine. Every transition is
// an audit event; the in-memory state is always the fold of apply_event over
// the audit log, both live and on replay.

#include <algorithm>
#include <chrono>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/agents.hpp"
#include "cfu/config.hpp"
#include "cfu/error.hpp"
#include "cfu/metrics.hpp"
#include "cfu/registry.hpp"
#include "cfu/store.hpp"
#include "cfu/synthgen.hpp"

namespace cfu::orchestrator {

using Json = nlohmann::json;

enum class State {
  received,
  screened_valid,
  screened_invalid,
  counted,
  auto_approved,
  escalated,
  human_approved,
  human_rejected
};

inline std::string_view to_string(State s) {
  switch (s) {
    case State::received: return "RECEIVED";
    case State::screened_valid: return "SCREENED_VALID";
    case State::screened_invalid: return "SCREENED_INVALID";
    case State::counted: return "COUNTED";
    case State::auto_approved: return "AUTO_APPROVED";
    case State::escalated: return "ESCALATED";
    case State::human_approved: return "HUMAN_APPROVED";
    case State::human_rejected: return "HUMAN_REJECTED";
  }
  return "RECEIVED";
}

inline bool is_terminal(State s) {
  return s == State::auto_approved || s == State::human_approved || s == State::human_rejected;
}

enum class EscalationCause { invalid, mismatch, latency };

inline std::string_view to_string(EscalationCause c) {
  switch (c) {
    case EscalationCause::invalid: return "invalid";
    case EscalationCause::mismatch: return "mismatch";
    case EscalationCause::latency: return "latency";
  }
  return "invalid";
}

inline EscalationCause cause_from_string(std::string_view s) {
  if (s == "invalid") return EscalationCause::invalid;
  if (s == "mismatch") return EscalationCause::mismatch;
  if (s == "latency") return EscalationCause::latency;
  fail(ErrorCode::validation, "cause: unknown escalation cause '" + std::string(s) + "'");
}

/// Identifiers (plate, run, reviewer) are restricted so they are safe in
/// paths, URLs and CSV cells.
inline bool valid_identifier(std::string_view s) {
  static const std::regex re("[A-Za-z0-9][A-Za-z0-9._-]{0,127}");
  return std::regex_match(s.begin(), s.end(), re);
}

inline Json to_json(const vision::Box& b) {
  return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max},
          {"y_max", b.y_max}, {"score", b.score}, {"class", std::string(to_string(b.cls))}};
}

inline vision::Box box_from_json(const Json& j) {
  return {j.at("x_min").get<double>(), j.at("y_min").get<double>(), j.at("x_max").get<double>(),
          j.at("y_max").get<double>(), j.at("score").get<double>(),
          colony_class_from_string(j.at("class").get<std::string>())};
}

// ---------------------------------------------------------------------------
// Expert verdicts
// ---------------------------------------------------------------------------

struct ExpertVerdict {
  std::string plate_id;
  std::string reviewer_id;
  std::uint32_t final_count = 0;
  PlateQuality final_quality = PlateQuality::valid;
  store::ClassCounts final_class_counts;
  std::string note;
  std::string timestamp;

  friend bool operator==(const ExpertVerdict&, const ExpertVerdict&) = default;
};

inline void validate(const ExpertVerdict& v) {
  require(valid_identifier(v.plate_id), "plate_id", "must match [A-Za-z0-9][A-Za-z0-9._-]*");
  require(valid_identifier(v.reviewer_id), "reviewer_id", "must match [A-Za-z0-9][A-Za-z0-9._-]*");
  if (v.final_quality == PlateQuality::invalid) {
    require(v.final_count == 0, "final_count", "must be 0 when final_quality is invalid");
  }
  const auto cls_total = static_cast<std::uint64_t>(v.final_class_counts.bacteria) + v.final_class_counts.mold;
  require(cls_total == 0 || cls_total == v.final_count, "final_class_counts",
          "bacteria + mold must equal final_count when given");
}

inline Json to_json(const ExpertVerdict& v) {
  return {{"plate_id", v.plate_id},
          {"reviewer_id", v.reviewer_id},
          {"final_count", v.final_count},
          {"final_quality", std::string(to_string(v.final_quality))},
          {"final_class_counts", {{"bacteria", v.final_class_counts.bacteria}, {"mold", v.final_class_counts.mold}}},
          {"note", v.note},
          {"timestamp", v.timestamp}};
}

namespace detail {

template <typename T>
T field(const Json& j, const char* name) {
  if (!j.contains(name)) fail(ErrorCode::validation, std::string(name) + ": required", {{"field", name}});
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::validation, std::string(name) + ": wrong type", {{"field", name}});
  }
}

template <typename T>
T field_or(const Json& j, const char* name, T fallback) {
  return j.contains(name) && !j.at(name).is_null() ? field<T>(j, name) : fallback;
}

inline std::uint32_t count_field(const Json& j, const char* name) {
  const auto v = field<Json>(j, name);
  require(v.is_number_integer() && v.get<std::int64_t>() >= 0 && v.get<std::int64_t>() <= 0xFFFFFFFFLL, name,
          "must be a non-negative integer");
  return v.get<std::uint32_t>();
}

}  // namespace detail

/// Parses and validates a verdict body; the plate id may come from the URL.
inline ExpertVerdict expert_verdict_from_json(const Json& j, const std::string& plate_id = {}) {
  require(j.is_object(), "body", "must be a JSON object");
  ExpertVerdict v;
  v.plate_id = plate_id.empty() ? detail::field<std::string>(j, "plate_id") : plate_id;
  if (!plate_id.empty() && j.contains("plate_id")) {
    require(j.at("plate_id") == plate_id, "plate_id", "does not match the URL");
  }
  v.reviewer_id = detail::field<std::string>(j, "reviewer_id");
  v.final_count = detail::count_field(j, "final_count");
  try {
    v.final_quality = quality_from_string(detail::field<std::string>(j, "final_quality"));
  } catch (const Error&) {
    fail(ErrorCode::validation, "final_quality: must be valid or invalid", {{"field", "final_quality"}});
  }
  if (j.contains("final_class_counts") && !j.at("final_class_counts").is_null()) {
    const auto& c = j.at("final_class_counts");
    require(c.is_object(), "final_class_counts", "must be an object");
    v.final_class_counts.bacteria = c.contains("bacteria") ? detail::count_field(c, "bacteria") : 0;
    v.final_class_counts.mold = c.contains("mold") ? detail::count_field(c, "mold") : 0;
  }
  v.note = detail::field_or<std::string>(j, "note", "");
  v.timestamp = detail::field_or<std::string>(j, "timestamp", "");
  validate(v);
  return v;
}

// ---------------------------------------------------------------------------
// Plate state and the transition function
// ---------------------------------------------------------------------------

struct Transition {
  State state;
  std::string timestamp;
  std::uint64_t sequence_no;
};

struct PlateState {
  std::string plate_id;
  std::string run_id;
  std::string image_sha256;
  State state = State::received;
  std::vector<agents::AgentVerdict> verdicts;
  Json screen_stats;  // null until screened
  std::vector<vision::Box> boxes;
  std::optional<metrics::ConsensusDecision> decision;
  std::optional<EscalationCause> escalation_cause;
  std::string escalation_reason;
  std::optional<ExpertVerdict> expert;
  std::vector<Transition> transitions;
  std::vector<std::uint64_t> event_ids;
  double latency_ms = 0.0;

  std::size_t counter_verdicts() const {
    return static_cast<std::size_t>(std::count_if(verdicts.begin(), verdicts.end(), [](const auto& v) {
      return v.agent != agents::AgentKind::screener;
    }));
  }

  const agents::AgentVerdict* verdict_of(agents::AgentKind k) const {
    for (const auto& v : verdicts)
      if (v.agent == k) return &v;
    return nullptr;
  }

  std::optional<std::string> timestamp_of(State s) const {
    for (const auto& t : transitions)
      if (t.state == s) return t.timestamp;
    return std::nullopt;
  }
};

inline Json to_json(const PlateState& p) {
  Json verdicts = Json::array();
  for (const auto& v : p.verdicts) verdicts.push_back(agents::to_json(v));
  Json boxes = Json::array();
  for (const auto& b : p.boxes) boxes.push_back(to_json(b));
  Json transitions = Json::array();
  for (const auto& t : p.transitions) {
    transitions.push_back({{"state", std::string(to_string(t.state))}, {"timestamp", t.timestamp},
                           {"sequence_no", t.sequence_no}});
  }
  Json j{{"plate_id", p.plate_id},
         {"run_id", p.run_id},
         {"image_sha256", p.image_sha256},
         {"state", std::string(to_string(p.state))},
         {"terminal", is_terminal(p.state)},
         {"verdicts", verdicts},
         {"screen_stats", p.screen_stats},
         {"boxes", boxes},
         {"decision", p.decision ? metrics::to_json(*p.decision) : Json(nullptr)},
         {"escalation", nullptr},
         {"expert_verdict", p.expert ? to_json(*p.expert) : Json(nullptr)},
         {"transitions", transitions},
         {"event_ids", p.event_ids},
         {"latency_ms", p.latency_ms},
         {"exported", p.state == State::auto_approved || p.state == State::human_approved}};
  if (p.escalation_cause) {
    j["escalation"] = {{"cause", std::string(to_string(*p.escalation_cause))}, {"reason", p.escalation_reason}};
  }
  return j;
}

inline bool operator==(const PlateState& a, const PlateState& b) { return to_json(a) == to_json(b); }

inline Error illegal(const PlateState& p, std::string_view action) {
  return Error(ErrorCode::illegal_transition,
               "plate " + p.plate_id + ": '" + std::string(action) + "' is not allowed in state " +
                   std::string(to_string(p.state)),
               {{"plate_id", p.plate_id}, {"state", std::string(to_string(p.state))}});
}

inline void enter(PlateState& p, State s, const store::AuditEvent& e) {
  p.state = s;
  p.transitions.push_back({s, e.timestamp, e.sequence_no});
}

/// The transition function. Plate events carry payload.plate_id; events for
/// unknown plates other than "received", or illegal in the current state,
/// throw. Non-plate events are ignored.
inline void apply_event(std::map<std::string, PlateState>& plates, const store::AuditEvent& e) {
  static const std::set<std::string> kPlateActions{"received", "screened", "count", "consensus", "escalated",
                                                   "verdict"};
  if (!kPlateActions.contains(e.action)) return;
  const auto& pl = e.payload;
  const auto id = pl.at("plate_id").get<std::string>();
  if (e.action == "received") {
    if (plates.contains(id)) fail(ErrorCode::conflict, "plate " + id + " already exists");
    PlateState p;
    p.plate_id = id;
    p.run_id = pl.at("run_id").get<std::string>();
    p.image_sha256 = pl.at("image_sha256").get<std::string>();
    p.event_ids.push_back(e.sequence_no);
    enter(p, State::received, e);
    plates.emplace(id, std::move(p));
    return;
  }
  const auto it = plates.find(id);
  if (it == plates.end()) fail(ErrorCode::not_found, "plate " + id + " not found");
  PlateState& p = it->second;

  if (e.action == "screened") {
    if (p.state != State::received) throw illegal(p, e.action);
    const auto v = agents::verdict_from_json(pl.at("verdict"));
    p.verdicts.push_back(v);
    p.screen_stats = pl.at("stats");
    enter(p, v.quality == PlateQuality::valid ? State::screened_valid : State::screened_invalid, e);
  } else if (e.action == "count") {
    const auto v = agents::verdict_from_json(pl.at("verdict"));
    if (p.state != State::screened_valid || v.agent == agents::AgentKind::screener || p.verdict_of(v.agent)) {
      throw illegal(p, e.action);
    }
    p.verdicts.push_back(v);
    if (pl.contains("boxes")) {
      for (const auto& b : pl.at("boxes")) p.boxes.push_back(box_from_json(b));
    }
    if (p.counter_verdicts() == 2) enter(p, State::counted, e);
  } else if (e.action == "consensus") {
    if (p.state != State::counted) throw illegal(p, e.action);
    p.decision = metrics::consensus_from_json(pl.at("decision"));
    p.latency_ms = pl.at("latency_ms").get<double>();
    if (pl.at("disposition").get<std::string>() == "auto_approve") {
      enter(p, State::auto_approved, e);
    } else {
      p.escalation_cause = cause_from_string(pl.at("cause").get<std::string>());
      p.escalation_reason = pl.at("reason").get<std::string>();
      enter(p, State::escalated, e);
    }
  } else if (e.action == "escalated") {
    const auto cause = cause_from_string(pl.at("cause").get<std::string>());
    const bool ok = (cause == EscalationCause::invalid && p.state == State::screened_invalid) ||
                    (cause == EscalationCause::latency &&
                     (p.state == State::screened_valid || p.state == State::counted));
    if (!ok) throw illegal(p, e.action);
    p.escalation_cause = cause;
    p.escalation_reason = pl.at("reason").get<std::string>();
    p.latency_ms = pl.at("latency_ms").get<double>();
    enter(p, State::escalated, e);
  } else if (e.action == "verdict") {
    if (p.state == State::human_approved || p.state == State::human_rejected) {
      fail(ErrorCode::conflict, "plate " + id + " already has an expert verdict", {{"plate_id", id}});
    }
    if (p.state != State::escalated) throw illegal(p, e.action);
    auto v = expert_verdict_from_json(pl.at("verdict"));
    enter(p, v.final_quality == PlateQuality::valid ? State::human_approved : State::human_rejected, e);
    p.expert = std::move(v);
  }
  p.event_ids.push_back(e.sequence_no);
}

/// Rebuilds every plate state from an audit log.
inline std::map<std::string, PlateState> replay(const std::vector<store::AuditEvent>& events) {
  std::map<std::string, PlateState> plates;
  for (const auto& e : events) apply_event(plates, e);
  return plates;
}

// ---------------------------------------------------------------------------
// Run statistics
// ---------------------------------------------------------------------------

struct RunStats {
  std::string run_id;
  std::uint64_t plates_total = 0;
  std::uint64_t auto_approved = 0;
  std::uint64_t escalated_mismatch = 0;  // includes latency escalations
  std::uint64_t escalated_invalid = 0;
  std::uint64_t pending = 0;             // not yet processed
  std::uint64_t awaiting_review = 0;
  std::uint64_t human_approved = 0;
  std::uint64_t human_rejected = 0;
  std::uint64_t counter_invocations = 0;
  std::uint64_t counter_invocations_without_prescreen = 0;
  double mean_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
  double max_latency_ms = 0.0;

  double savings_fraction() const {
    return counter_invocations_without_prescreen == 0
               ? 0.0
               : 1.0 - static_cast<double>(counter_invocations) /
                           static_cast<double>(counter_invocations_without_prescreen);
  }
};

inline Json to_json(const RunStats& s) {
  return {{"run_id", s.run_id},
          {"plates_total", s.plates_total},
          {"auto_approved", s.auto_approved},
          {"escalated_mismatch", s.escalated_mismatch},
          {"escalated_invalid", s.escalated_invalid},
          {"pending", s.pending},
          {"awaiting_review", s.awaiting_review},
          {"human_approved", s.human_approved},
          {"human_rejected", s.human_rejected},
          {"counter_invocations", s.counter_invocations},
          {"counter_invocations_without_prescreen", s.counter_invocations_without_prescreen},
          {"savings_fraction", s.savings_fraction()},
          {"mean_latency_ms", s.mean_latency_ms},
          {"p95_latency_ms", s.p95_latency_ms},
          {"max_latency_ms", s.max_latency_ms}};
}

inline RunStats compute_run_stats(const std::string& run_id, const std::vector<const PlateState*>& plates) {
  RunStats s;
  s.run_id = run_id;
  std::vector<double> lat;
  for (const auto* p : plates) {
    ++s.plates_total;
    if (p->state == State::received) {
      ++s.pending;
      continue;
    }
    const bool screened_valid = p->timestamp_of(State::screened_valid).has_value();
    if (screened_valid) s.counter_invocations += 2;
    if (p->timestamp_of(State::auto_approved)) ++s.auto_approved;
    if (p->escalation_cause) {
      if (*p->escalation_cause == EscalationCause::invalid) ++s.escalated_invalid;
      else ++s.escalated_mismatch;
    }
    if (p->state == State::escalated) ++s.awaiting_review;
    if (p->state == State::human_approved) ++s.human_approved;
    if (p->state == State::human_rejected) ++s.human_rejected;
    if (p->state != State::screened_valid && p->state != State::screened_invalid && p->state != State::counted) {
      lat.push_back(p->latency_ms);
    }
  }
  s.counter_invocations_without_prescreen = 2 * s.plates_total;
  if (!lat.empty()) {
    double sum = 0.0;
    for (double v : lat) sum += v;
    s.mean_latency_ms = sum / static_cast<double>(lat.size());
    std::sort(lat.begin(), lat.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lat.size())));
    s.p95_latency_ms = lat[std::max<std::size_t>(rank, 1) - 1];
    s.max_latency_ms = lat.back();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Reference data attached at submission (synthetic ground truth)
// ---------------------------------------------------------------------------

struct Reference {
  std::uint32_t true_count = 0;
  bool valid = true;
  std::vector<vision::Box> boxes;
};

inline Json to_json(const Reference& r) {
  Json boxes = Json::array();
  for (const auto& b : r.boxes) boxes.push_back(to_json(b));
  return {{"true_count", r.true_count}, {"valid", r.valid}, {"boxes", boxes}};
}

inline Reference reference_from_json(const Json& j) {
  Reference r;
  r.true_count = j.at("true_count").get<std::uint32_t>();
  r.valid = j.at("valid").get<bool>();
  for (const auto& b : j.at("boxes")) r.boxes.push_back(box_from_json(b));
  return r;
}

inline Reference reference_from_truth(const synthgen::GroundTruth& gt) {
  Reference r;
  r.true_count = gt.true_count;
  r.valid = gt.valid;
  for (const auto& c : gt.colonies) {
    r.boxes.push_back({c.x - c.radius, c.y - c.radius, c.x + c.radius, c.y + c.radius, 1.0, c.cls});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Recalibration
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMinFeedbackRows = 25;

/// Fixed search grids; the incumbent value is always added.
inline std::vector<double> counter_a_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 12; ++i) g.push_back(0.70 + 0.02 * i);
  return g;
}

inline std::vector<double> counter_b_grid() { return {1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0}; }

struct CalibrationUpdate {
  std::uint64_t version = 0;
  std::uint64_t based_on_version = 0;
  double counter_a_fraction_before = 0.0;
  double counter_a_fraction_after = 0.0;
  double counter_b_height_before = 0.0;
  double counter_b_height_after = 0.0;
  double loss_a_before = 0.0;
  double loss_a_after = 0.0;
  double loss_b_before = 0.0;
  double loss_b_after = 0.0;
  std::size_t rows = 0;
  std::string proposed_at;

  double loss_before() const { return loss_a_before + loss_b_before; }
  double loss_after() const { return loss_a_after + loss_b_after; }
  bool changed() const {
    return counter_a_fraction_after != counter_a_fraction_before || counter_b_height_after != counter_b_height_before;
  }
};

inline Json to_json(const CalibrationUpdate& u) {
  return {{"version", u.version},
          {"based_on_version", u.based_on_version},
          {"counter_a", {{"binarize_fraction_before", u.counter_a_fraction_before},
                         {"binarize_fraction_after", u.counter_a_fraction_after},
                         {"loss_before", u.loss_a_before},
                         {"loss_after", u.loss_a_after}}},
          {"counter_b", {{"peak_height_before", u.counter_b_height_before},
                         {"peak_height_after", u.counter_b_height_after},
                         {"loss_before", u.loss_b_before},
                         {"loss_after", u.loss_b_after}}},
          {"loss_before", u.loss_before()},
          {"loss_after", u.loss_after()},
          {"changed", u.changed()},
          {"rows", u.rows},
          {"proposed_at", u.proposed_at}};
}

inline CalibrationUpdate calibration_from_json(const Json& j) {
  CalibrationUpdate u;
  u.version = j.at("version").get<std::uint64_t>();
  u.based_on_version = j.at("based_on_version").get<std::uint64_t>();
  const auto& a = j.at("counter_a");
  const auto& b = j.at("counter_b");
  u.counter_a_fraction_before = a.at("binarize_fraction_before").get<double>();
  u.counter_a_fraction_after = a.at("binarize_fraction_after").get<double>();
  u.loss_a_before = a.at("loss_before").get<double>();
  u.loss_a_after = a.at("loss_after").get<double>();
  u.counter_b_height_before = b.at("peak_height_before").get<double>();
  u.counter_b_height_after = b.at("peak_height_after").get<double>();
  u.loss_b_before = b.at("loss_before").get<double>();
  u.loss_b_after = b.at("loss_after").get<double>();
  u.rows = j.at("rows").get<std::size_t>();
  u.proposed_at = j.at("proposed_at").get<std::string>();
  return u;
}

struct FeedbackRow {
  GrayImage image;
  ExpertVerdict verdict;
};

/// Loss of counter A on one row: alpha * smoothL1 on the count plus, when
/// the expert gave a strict class majority, beta * cross-entropy of the
/// plate-level mold share of the detected boxes.
inline double counter_a_row_loss(const agents::PrimaryCount& c, const ExpertVerdict& v,
                                 const metrics::LossWeights& w) {
  double loss = w.alpha * metrics::smooth_l1(static_cast<double>(c.verdict.count) - v.final_count);
  const auto& cc = v.final_class_counts;
  if (w.beta > 0.0 && cc.bacteria != cc.mold) {
    double mold = 0.0;
    for (const auto& b : c.boxes) mold += b.cls == ColonyClass::mold;
    const double p_mold = (mold + 0.5) / (static_cast<double>(c.boxes.size()) + 1.0);
    const auto truth = cc.mold > cc.bacteria ? ColonyClass::mold : ColonyClass::bacteria;
    loss += w.beta * metrics::cross_entropy(truth, {1.0 - p_mold, p_mold});
  }
  return loss;
}

/// Grid search for both counter thresholds. Each counter is searched
/// independently; a candidate replaces the incumbent only on strictly lower
/// mean loss, so the result never scores worse than the starting point.
inline CalibrationUpdate search_calibration(const std::vector<FeedbackRow>& rows, const PipelineConfig& cfg) {
  if (rows.size() < kMinFeedbackRows) {
    fail(ErrorCode::insufficient_data,
         "recalibration needs at least " + std::to_string(kMinFeedbackRows) + " usable feedback rows, have " +
             std::to_string(rows.size()),
         {{"rows", rows.size()}, {"required", kMinFeedbackRows}});
  }
  const double n = static_cast<double>(rows.size());
  auto loss_a = [&](double fraction) {
    auto c = cfg.counter_a;
    c.binarize_fraction = fraction;
    double total = 0.0;
    for (const auto& r : rows) {
      agents::AgentVerdict pass{r.verdict.plate_id, PlateQuality::valid, 0, "feedback", agents::AgentKind::screener, 0};
      const auto res = agents::count_primary(agents::ScreenedPlate::admit(r.image, pass), c);
      total += counter_a_row_loss(res, r.verdict, cfg.loss);
    }
    return total / n;
  };
  auto loss_b = [&](double height) {
    auto c = cfg.counter_b;
    c.peak_height = height;
    double total = 0.0;
    for (const auto& r : rows) {
      agents::AgentVerdict pass{r.verdict.plate_id, PlateQuality::valid, 0, "feedback", agents::AgentKind::screener, 0};
      const auto v = agents::count_secondary(agents::ScreenedPlate::admit(r.image, pass), c);
      total += cfg.loss.alpha * metrics::smooth_l1(static_cast<double>(v.count) - r.verdict.final_count);
    }
    return total / n;
  };

  CalibrationUpdate u;
  u.rows = rows.size();
  u.counter_a_fraction_before = u.counter_a_fraction_after = cfg.counter_a.binarize_fraction;
  u.loss_a_before = u.loss_a_after = loss_a(cfg.counter_a.binarize_fraction);
  for (double f : counter_a_grid()) {
    if (f == u.counter_a_fraction_before) continue;
    const double l = loss_a(f);
    if (l < u.loss_a_after) {
      u.loss_a_after = l;
      u.counter_a_fraction_after = f;
    }
  }
  u.counter_b_height_before = u.counter_b_height_after = cfg.counter_b.peak_height;
  u.loss_b_before = u.loss_b_after = loss_b(cfg.counter_b.peak_height);
  for (double h : counter_b_grid()) {
    if (h == u.counter_b_height_before) continue;
    const double l = loss_b(h);
    if (l < u.loss_b_after) {
      u.loss_b_after = l;
      u.counter_b_height_after = h;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Orchestrator
// ---------------------------------------------------------------------------

struct Submission {
  std::string plate_id;
  bool created = false;
};

class Orchestrator {
 public:
  Orchestrator(store::Store& store, PipelineConfig cfg) : store_(store), cfg_(std::move(cfg)) {
    validate(cfg_);
    plates_ = replay(store_.audit_events());
    for (const auto& [id, p] : plates_) by_sha_[p.image_sha256] = id;
    for (const auto& rec : store_.records(store::Segment::plates)) {
      if (rec.contains("reference")) references_[rec.at("plate_id").get<std::string>()] = reference_from_json(rec.at("reference"));
    }
    for (const auto& rec : store_.records(store::Segment::calibrations)) {
      const auto u = calibration_from_json(rec.at("update"));
      calibration_version_ = std::max(calibration_version_, u.version);
      if (rec.at("status") == "applied") {
        cfg_.counter_a.binarize_fraction = u.counter_a_fraction_after;
        cfg_.counter_b.peak_height = u.counter_b_height_after;
        applied_version_ = u.version;
      }
    }
    restore_promoted_model();
  }

  PipelineConfig config() const {
    std::shared_lock lk(mu_);
    return cfg_;
  }

  store::Store& store() { return store_; }

  // -- intake ---------------------------------------------------------------

  /// Registers a PNG. Identical bytes return the existing plate.
  Submission submit(std::span<const std::uint8_t> png, const std::string& run_id = "default",
                    const std::optional<std::string>& plate_id = std::nullopt,
                    const std::optional<Reference>& reference = std::nullopt) {
    require(valid_identifier(run_id), "run_id", "must match [A-Za-z0-9][A-Za-z0-9._-]*");
    const auto img = decode_png(png);  // validates the payload before anything is stored
    vision::validate_image(img);
    const auto sha = to_hex(sha256(png));
    std::lock_guard submit_lk(submit_mu_);
    {
      std::shared_lock lk(mu_);
      if (const auto it = by_sha_.find(sha); it != by_sha_.end()) return {it->second, false};
    }
    const std::string id = plate_id.value_or("p-" + sha.substr(0, 16));
    require(valid_identifier(id), "plate_id", "must match [A-Za-z0-9][A-Za-z0-9._-]*");
    {
      std::shared_lock lk(mu_);
      if (plates_.contains(id)) {
        fail(ErrorCode::conflict, "plate " + id + " already exists with different image bytes", {{"plate_id", id}});
      }
    }
    store_.put_image(png);
    Json rec{{"plate_id", id}, {"run_id", run_id}, {"image_sha256", sha}};
    if (reference) rec["reference"] = to_json(*reference);
    store_.append_record(store::Segment::plates, rec);
    commit("system", "received", {{"plate_id", id}, {"run_id", run_id}, {"image_sha256", sha}});
    std::unique_lock lk(mu_);
    by_sha_[sha] = id;
    if (reference) references_[id] = *reference;
    return {id, true};
  }

  Submission submit(const GrayImage& img, const std::string& run_id = "default",
                    const std::optional<std::string>& plate_id = std::nullopt,
                    const std::optional<Reference>& reference = std::nullopt) {
    return submit(encode_png(img), run_id, plate_id, reference);
  }

  // -- processing -----------------------------------------------------------

  PlateState process_plate(const std::string& id) {
    const auto lock = plate_lock(id);
    std::lock_guard plk(*lock);
    const auto t0 = std::chrono::steady_clock::now();
    const PlateState before = get(id);
    if (before.state != State::received) throw illegal(before, "process");
    const auto cfg = config();
    auto image = std::make_shared<const GrayImage>(decode_png(store_.image_bytes(before.image_sha256)));

    const auto sr = agents::screen(id, *image, cfg.screener);
    commit("screener", "screened", {{"plate_id", id}, {"verdict", agents::to_json(sr.verdict)},
                                    {"stats", agents::to_json(sr.stats)}});
    if (sr.verdict.quality == PlateQuality::invalid) {
      return commit("system", "escalated", {{"plate_id", id}, {"cause", "invalid"}, {"reason", sr.verdict.reason},
                                            {"latency_ms", ms_since(t0)}});
    }

    // Counters run on detached threads so an overrun cannot hold the caller
    // past the budget.
    const auto deadline = t0 + std::chrono::microseconds(static_cast<std::int64_t>(cfg.latency_budget_ms * 1000.0));
    auto fa = launch([image, id, c = cfg.counter_a, v = sr.verdict] {
      return agents::count_primary(agents::ScreenedPlate::admit(*image, v), c);
    });
    auto fb = launch([image, id, c = cfg.counter_b, v = sr.verdict] {
      return agents::count_secondary(agents::ScreenedPlate::admit(*image, v), c);
    });
    if (fa.wait_until(deadline) != std::future_status::ready || fb.wait_until(deadline) != std::future_status::ready) {
      return commit("system", "escalated",
                    {{"plate_id", id}, {"cause", "latency"}, {"reason", "latency"}, {"latency_ms", ms_since(t0)}});
    }
    const auto a = fa.get();
    const auto b = fb.get();
    Json boxes = Json::array();
    for (const auto& bx : a.boxes) boxes.push_back(to_json(bx));
    commit("counter_a", "count", {{"plate_id", id}, {"verdict", agents::to_json(a.verdict)}, {"boxes", boxes}});
    commit("counter_b", "count", {{"plate_id", id}, {"verdict", agents::to_json(b)}});

    const auto decision = metrics::consensus(a.verdict.count, b.count, cfg.delta);
    const double latency = ms_since(t0);
    Json payload{{"plate_id", id}, {"decision", metrics::to_json(decision)}, {"latency_ms", latency}};
    if (latency > cfg.latency_budget_ms) {
      payload["disposition"] = "escalate";
      payload["cause"] = "latency";
      payload["reason"] = "latency";
    } else if (decision.outcome == metrics::ConsensusOutcome::auto_approve) {
      payload["disposition"] = "auto_approve";
    } else {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "count mismatch %lld vs %lld (relative delta %.4f > %.4f)",
                    static_cast<long long>(decision.count_a), static_cast<long long>(decision.count_b),
                    decision.relative_delta, decision.delta_threshold);
      payload["disposition"] = "escalate";
      payload["cause"] = "mismatch";
      payload["reason"] = buf;
    }
    auto state = commit("consensus", "consensus", payload);
    if (state.state == State::auto_approved) outbox(state);
    return state;
  }

  PlateState submit_expert_verdict(ExpertVerdict v) {
    validate(v);
    const auto lock = plate_lock(v.plate_id);
    std::lock_guard plk(*lock);
    const PlateState before = get(v.plate_id);
    if (before.state == State::human_approved || before.state == State::human_rejected) {
      fail(ErrorCode::conflict, "plate " + v.plate_id + " already has an expert verdict", {{"plate_id", v.plate_id}});
    }
    if (before.state != State::escalated) throw illegal(before, "verdict");
    if (v.timestamp.empty()) v.timestamp = store_.now();
    store_.append_record(store::Segment::feedback,
                         {{"verdict", to_json(v)}, {"image_sha256", before.image_sha256}, {"run_id", before.run_id}});
    auto state = commit("human:" + v.reviewer_id, "verdict", {{"plate_id", v.plate_id}, {"verdict", to_json(v)}});
    if (state.state == State::human_approved) outbox(state);
    return state;
  }

  // -- queries --------------------------------------------------------------

  PlateState get(const std::string& id) const {
    std::shared_lock lk(mu_);
    const auto it = plates_.find(id);
    if (it == plates_.end()) fail(ErrorCode::not_found, "plate " + id + " not found", {{"plate_id", id}});
    return it->second;
  }

  std::map<std::string, PlateState> snapshot() const {
    std::shared_lock lk(mu_);
    return plates_;
  }

  std::optional<Reference> reference(const std::string& id) const {
    std::shared_lock lk(mu_);
    const auto it = references_.find(id);
    return it == references_.end() ? std::nullopt : std::optional<Reference>(it->second);
  }

  /// Escalated plates awaiting a verdict, oldest escalation first.
  std::vector<PlateState> review_queue() const {
    std::vector<PlateState> out;
    {
      std::shared_lock lk(mu_);
      for (const auto& [id, p] : plates_)
        if (p.state == State::escalated) out.push_back(p);
    }
    std::sort(out.begin(), out.end(), [](const PlateState& a, const PlateState& b) {
      return a.transitions.back().sequence_no < b.transitions.back().sequence_no;
    });
    return out;
  }

  std::vector<std::string> runs() const {
    std::set<std::string> ids;
    std::shared_lock lk(mu_);
    for (const auto& [id, p] : plates_) ids.insert(p.run_id);
    return {ids.begin(), ids.end()};
  }

  std::vector<PlateState> plates_in_run(const std::string& run_id) const {
    std::vector<PlateState> out;
    std::shared_lock lk(mu_);
    for (const auto& [id, p] : plates_)
      if (p.run_id == run_id) out.push_back(p);
    return out;
  }

  RunStats run_stats(const std::string& run_id) const {
    const auto plates = plates_in_run(run_id);
    if (plates.empty()) fail(ErrorCode::not_found, "run " + run_id + " not found", {{"run_id", run_id}});
    std::vector<const PlateState*> ptrs;
    for (const auto& p : plates) ptrs.push_back(&p);
    return compute_run_stats(run_id, ptrs);
  }

  // -- export ---------------------------------------------------------------

  static store::QmExportRecord export_record(const PlateState& p) {
    store::QmExportRecord r;
    r.plate_id = p.plate_id;
    r.decision_trace_ids = p.event_ids;
    r.export_timestamp = p.transitions.back().timestamp;
    if (p.state == State::auto_approved) {
      r.disposition = store::Disposition::automatic;
      r.final_count = static_cast<std::uint32_t>(p.decision->count_a);
      for (const auto& b : p.boxes) {
        if (b.cls == ColonyClass::mold) ++r.class_counts.mold;
        else ++r.class_counts.bacteria;
      }
    } else {
      r.disposition = store::Disposition::human;
      r.final_count = p.expert->final_count;
      r.class_counts = p.expert->final_class_counts;
    }
    return r;
  }

  /// Writes the run's QM export. Every plate of the run must be terminal.
  store::QmExportFiles export_qm(const std::string& run_id, const std::filesystem::path& out) {
    require(valid_identifier(run_id), "run_id", "must match [A-Za-z0-9][A-Za-z0-9._-]*");
    const auto plates = plates_in_run(run_id);
    if (plates.empty()) fail(ErrorCode::not_found, "run " + run_id + " not found", {{"run_id", run_id}});
    std::vector<std::string> open;
    std::vector<store::QmExportRecord> records;
    for (const auto& p : plates) {
      if (!is_terminal(p.state)) open.push_back(p.plate_id);
      else if (p.state != State::human_rejected) records.push_back(export_record(p));
    }
    if (!open.empty()) {
      fail(ErrorCode::illegal_transition,
           "run " + run_id + " is not complete: " + std::to_string(open.size()) + " plate(s) not terminal",
           {{"run_id", run_id}, {"open_plates", open}});
    }
    const auto files = store::write_qm_export(std::move(records), run_id, out, cfg_.fsync);
    commit("system", "export", {{"run_id", run_id}, {"records", files.records},
                                {"ndjson_sha256", to_hex(sha256(store::detail::read_all(files.ndjson)))},
                                {"csv_sha256", to_hex(sha256(store::detail::read_all(files.csv)))}});
    return files;
  }

  // -- recalibration ----------------------------------------------------------

  std::vector<FeedbackRow> feedback_rows() const {
    std::vector<FeedbackRow> rows;
    for (const auto& rec : store_.records(store::Segment::feedback)) {
      auto v = expert_verdict_from_json(rec.at("verdict"));
      if (v.final_quality != PlateQuality::valid) continue;
      rows.push_back({decode_png(store_.image_bytes(rec.at("image_sha256").get<std::string>())), std::move(v)});
    }
    return rows;
  }

  /// Phase one: search and record a proposal. Nothing changes until apply.
  CalibrationUpdate propose_recalibration() {
    const auto rows = feedback_rows();
    const auto cfg = config();
    auto u = search_calibration(rows, cfg);
    std::lock_guard lk(calib_mu_);
    u.version = ++calibration_version_;
    u.based_on_version = applied_version_;
    u.proposed_at = store_.now();
    store_.append_record(store::Segment::calibrations, {{"status", "proposed"}, {"update", to_json(u)}});
    commit("system", "calibration_proposed", to_json(u));
    return u;
  }

  /// Phase two: installs a proposal made against the currently applied version.
  void apply_calibration(const CalibrationUpdate& u) {
    std::lock_guard lk(calib_mu_);
    bool proposed = false, applied = false;
    for (const auto& rec : store_.records(store::Segment::calibrations)) {
      if (rec.at("update").at("version").get<std::uint64_t>() != u.version) continue;
      if (rec.at("status") == "proposed") proposed = true;
      if (rec.at("status") == "applied") applied = true;
    }
    if (!proposed) fail(ErrorCode::not_found, "calibration version " + std::to_string(u.version) + " was never proposed");
    if (applied) fail(ErrorCode::conflict, "calibration version " + std::to_string(u.version) + " is already applied");
    if (u.based_on_version != applied_version_) {
      fail(ErrorCode::conflict, "calibration version " + std::to_string(u.version) +
                                    " is stale: the applied configuration changed since it was proposed");
    }
    store_.append_record(store::Segment::calibrations, {{"status", "applied"}, {"update", to_json(u)}});
    commit("system", "calibration_applied", {{"version", u.version}});
    std::unique_lock wl(mu_);
    cfg_.counter_a.binarize_fraction = u.counter_a_fraction_after;
    cfg_.counter_b.peak_height = u.counter_b_height_after;
    applied_version_ = u.version;
  }

  std::uint64_t applied_calibration_version() const {
    std::lock_guard lk(calib_mu_);
    return applied_version_;
  }

  // -- registry -------------------------------------------------------------

  /// Cross-validates the candidates, promotes the winner, fits it on the
  /// whole dataset and installs it as counter A's classifier.
  registry::PromotionRecord train_and_promote(const std::vector<registry::LabeledSample>& data,
                                              std::span<const std::shared_ptr<const registry::Candidate>> candidates,
                                              std::uint64_t seed = 0) {
    const auto reports = registry::evaluate_candidates(data, candidates, seed);
    const auto rec = registry::promote(reports, store_.now());
    Json samples = Json::array();
    for (const auto& s : data) {
      const auto& f = s.features;
      samples.push_back({f.area, f.circularity, f.mean_intensity, f.intensity_variance, f.edge_density,
                         std::string(to_string(s.label))});
    }
    auto j = registry::to_json(rec);
    j["training_set"] = samples;
    store_.append_record(store::Segment::promotions, j);
    commit("system", "promotion", registry::to_json(rec));
    install_model(rec.candidate_id, data);
    return rec;
  }

  std::vector<registry::PromotionRecord> promotions() const {
    std::vector<registry::PromotionRecord> out;
    for (const auto& j : store_.records(store::Segment::promotions)) out.push_back(registry::promotion_from_json(j));
    return out;
  }

  /// Checks live agreement with experts against the promoted model's CV
  /// score; a degradation appends a retraining trigger to the audit log.
  registry::LiveStatus monitor_live(std::span<const registry::LiveObservation> window) {
    const auto log = promotions();
    if (log.empty()) fail(ErrorCode::insufficient_data, "no promoted model to monitor");
    const auto cfg = config();
    const auto st = registry::monitor_live(window, log.back().report.balanced_f1, cfg.degradation_margin,
                                           cfg.live_window);
    if (st.degraded) {
      commit("system", "retraining_trigger", {{"candidate_id", log.back().candidate_id},
                                              {"live_f1", st.live_f1},
                                              {"threshold", st.threshold},
                                              {"window", window.size()}});
    }
    return st;
  }

 private:
  template <typename F>
  static std::future<std::invoke_result_t<F&>> launch(F f) {
    using R = std::invoke_result_t<F&>;
    std::packaged_task<R()> task(std::move(f));
    auto fut = task.get_future();
    std::thread(std::move(task)).detach();
    return fut;
  }

  static double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  std::shared_ptr<std::mutex> plate_lock(const std::string& id) {
    std::lock_guard lk(locks_mu_);
    auto& m = plate_locks_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  /// Appends an event, then folds it into the live state. Returns the
  /// affected plate's new state (default state for non-plate events).
  PlateState commit(const std::string& actor, const std::string& action, const Json& payload) {
    std::unique_lock lk(mu_);
    // Dry-run the transition first so an illegal event is never written.
    if (payload.contains("plate_id")) {
      store::AuditEvent trial;
      trial.actor = actor;
      trial.action = action;
      trial.payload = payload;
      trial.sequence_no = store_.audit_size();
      if (action == "received") {
        if (plates_.contains(payload.at("plate_id").get<std::string>())) {
          fail(ErrorCode::conflict, "plate already exists");
        }
      } else {
        const auto id = payload.at("plate_id").get<std::string>();
        std::map<std::string, PlateState> one;
        if (const auto it = plates_.find(id); it != plates_.end()) one.emplace(id, it->second);
        apply_event(one, trial);
      }
    }
    const auto e = store_.append_audit(actor, action, payload);
    apply_event(plates_, e);
    if (payload.contains("plate_id")) return plates_.at(payload.at("plate_id").get<std::string>());
    return {};
  }

  void outbox(const PlateState& p) {
    auto j = store::to_json(export_record(p));
    j["run_id"] = p.run_id;
    store_.append_record(store::Segment::qm_outbox, j);
  }

  void install_model(const std::string& id, const std::vector<registry::LabeledSample>& data) {
    std::shared_ptr<const registry::Model> model;
    for (const auto& c : registry::default_candidates()) {
      if (c->id() == id) model = c->fit(data);
    }
    std::unique_lock lk(mu_);
    cfg_.counter_a.classifier = model;
  }

  void restore_promoted_model() {
    const auto recs = store_.records(store::Segment::promotions);
    if (recs.empty()) return;
    const auto& last = recs.back();
    std::vector<registry::LabeledSample> data;
    if (last.contains("training_set")) {
      for (const auto& row : last.at("training_set")) {
        registry::LabeledSample s;
        s.features = {row[0].get<double>(), row[1].get<double>(), row[2].get<double>(), row[3].get<double>(),
                      row[4].get<double>()};
        s.label = colony_class_from_string(row[5].get<std::string>());
        data.push_back(s);
      }
    }
    install_model(last.at("candidate_id").get<std::string>(), data);
  }

  store::Store& store_;
  PipelineConfig cfg_;
  mutable std::shared_mutex mu_;
  std::mutex submit_mu_;
  std::mutex locks_mu_;
  mutable std::mutex calib_mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> plate_locks_;
  std::map<std::string, PlateState> plates_;
  std::map<std::string, std::string> by_sha_;
  std::map<std::string, Reference> references_;
  std::uint64_t calibration_version_ = 0;
  std::uint64_t applied_version_ = 0;
};

}  // namespace cfu::orchestrator
