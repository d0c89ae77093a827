#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <thread>
#include <unistd.h>

#include "cfu/orchestrator.hpp"
#include "cfu/synthgen.hpp"

using namespace cfu;
using namespace cfu::orchestrator;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& tag)
      : dir(fs::temp_directory_path() / ("cfu-unit-orch-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

store::StoreOptions quick() { return {false, stepping_clock()}; }

PipelineConfig base_config() {
  PipelineConfig c;
  c.fsync = false;
  return c;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected cfu::Error");
  return ErrorCode::storage;
}

synthgen::RenderedPlate clean_plate(std::uint64_t seed) {
  synthgen::SceneSpec s;
  s.seed = seed;
  return synthgen::generate_plate(s);
}

synthgen::RenderedPlate glare_plate(std::uint64_t seed) {
  synthgen::SceneSpec s;
  s.seed = seed;
  s.artifact = {synthgen::ArtifactKind::glare, 0.8};
  return synthgen::generate_plate(s);
}

/// Small plates keep feedback searches cheap.
synthgen::RenderedPlate small_plate(std::uint64_t seed) {
  synthgen::SceneSpec s;
  s.seed = seed;
  s.image_side = 192;
  s.plate_radius = 85;
  s.colony_count_mean = 4;
  s.colony_radius_range = {5, 12};
  return synthgen::generate_plate(s);
}

ExpertVerdict verdict(const std::string& id, std::uint32_t count, PlateQuality q = PlateQuality::valid) {
  return {id, "rev1", count, q, {}, "", ""};
}

// Hand-built event stream for a plate, for state-machine and accounting checks.
struct Script {
  std::map<std::string, PlateState> plates;
  std::uint64_t seq = 0;

  void emit(const std::string& action, Json payload) {
    store::AuditEvent e;
    e.sequence_no = seq++;
    e.timestamp = format_iso8601(TimePoint{std::chrono::milliseconds(seq)});
    e.action = action;
    e.payload = std::move(payload);
    apply_event(plates, e);
  }

  void received(const std::string& id, const std::string& run = "r") {
    emit("received", {{"plate_id", id}, {"run_id", run}, {"image_sha256", id}});
  }

  void screened(const std::string& id, bool valid) {
    agents::AgentVerdict v{id, valid ? PlateQuality::valid : PlateQuality::invalid, 0, valid ? "ok" : "glare",
                           agents::AgentKind::screener, 1.0};
    emit("screened", {{"plate_id", id}, {"verdict", agents::to_json(v)}, {"stats", Json::object()}});
  }

  void counted(const std::string& id, std::uint32_t a, std::uint32_t b) {
    agents::AgentVerdict va{id, PlateQuality::valid, a, "a", agents::AgentKind::counter_a, 1.0};
    agents::AgentVerdict vb{id, PlateQuality::valid, b, "b", agents::AgentKind::counter_b, 1.0};
    emit("count", {{"plate_id", id}, {"verdict", agents::to_json(va)}, {"boxes", Json::array()}});
    emit("count", {{"plate_id", id}, {"verdict", agents::to_json(vb)}});
    const auto d = metrics::consensus(a, b);
    Json p{{"plate_id", id}, {"decision", metrics::to_json(d)}, {"latency_ms", 5.0}};
    if (d.outcome == metrics::ConsensusOutcome::auto_approve) {
      p["disposition"] = "auto_approve";
    } else {
      p["disposition"] = "escalate";
      p["cause"] = "mismatch";
      p["reason"] = "count mismatch";
    }
    emit("consensus", p);
  }

  void invalid(const std::string& id) {
    screened(id, false);
    emit("escalated", {{"plate_id", id}, {"cause", "invalid"}, {"reason", "glare"}, {"latency_ms", 2.0}});
  }

  RunStats stats(const std::string& run = "r") const {
    std::vector<const PlateState*> ptrs;
    for (const auto& [id, p] : plates)
      if (p.run_id == run) ptrs.push_back(&p);
    return compute_run_stats(run, ptrs);
  }
};

}  // namespace

TEST_CASE("clean plate auto-approves and is exported", "[orchestrator]") {
  Scratch s("clean");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto p = clean_plate(21);
  const auto sub = orch.submit(p.image, "run1", "plate-21", reference_from_truth(p.truth));
  CHECK(sub.created);
  CHECK(orch.get("plate-21").state == State::received);
  const auto done = orch.process_plate(sub.plate_id);
  CHECK(done.state == State::auto_approved);
  REQUIRE(done.decision.has_value());
  CHECK(done.decision->count_a == p.truth.true_count);
  CHECK(done.counter_verdicts() == 2);
  CHECK(done.latency_ms > 0.0);
  CHECK(to_json(done).at("exported") == true);
  const auto outbox = st.records(store::Segment::qm_outbox);
  REQUIRE(outbox.size() == 1);
  CHECK(outbox[0].at("plate_id") == "plate-21");
  CHECK(outbox[0].at("disposition") == "auto");
  CHECK(outbox[0].at("final_count") == p.truth.true_count);
  std::vector<State> path;
  for (const auto& t : done.transitions) path.push_back(t.state);
  CHECK(path == std::vector<State>{State::received, State::screened_valid, State::counted, State::auto_approved});
}

TEST_CASE("glare plate escalates without invoking counters", "[orchestrator]") {
  Scratch s("glare");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto sub = orch.submit(glare_plate(5).image, "run1");
  const auto done = orch.process_plate(sub.plate_id);
  CHECK(done.state == State::escalated);
  CHECK(done.escalation_cause == EscalationCause::invalid);
  CHECK(done.escalation_reason == "glare");
  CHECK(done.counter_verdicts() == 0);
  CHECK_FALSE(done.decision.has_value());
  for (const auto& e : st.audit_events()) {
    CHECK(e.actor != "counter_a");
    CHECK(e.actor != "counter_b");
  }
  const auto rs = orch.run_stats("run1");
  CHECK(rs.counter_invocations == 0);
  CHECK(rs.escalated_invalid == 1);
}

TEST_CASE("a counter disagreement escalates with both verdicts attached", "[orchestrator]") {
  Scratch s("mismatch");
  store::Store st(s.dir, quick());
  auto cfg = base_config();
  cfg.counter_b.peak_height = 1000.0;  // counter B sees no peaks at all
  Orchestrator orch(st, cfg);
  const auto p = clean_plate(22);
  REQUIRE(p.truth.true_count > 0);
  const auto sub = orch.submit(p.image, "run1");
  const auto done = orch.process_plate(sub.plate_id);
  CHECK(done.state == State::escalated);
  CHECK(done.escalation_cause == EscalationCause::mismatch);
  REQUIRE(done.decision.has_value());
  CHECK(done.decision->count_b == 0);
  CHECK(done.decision->relative_delta == 1.0);
  CHECK(done.counter_verdicts() == 2);
  CHECK(st.records(store::Segment::qm_outbox).empty());
}

TEST_CASE("counts of 100 and 110 escalate at a 9.09 percent delta", "[orchestrator]") {
  Script sc;
  sc.received("x");
  sc.screened("x", true);
  sc.counted("x", 100, 110);
  const auto& p = sc.plates.at("x");
  CHECK(p.state == State::escalated);
  CHECK(p.escalation_cause == EscalationCause::mismatch);
  CHECK(p.decision->relative_delta == Catch::Approx(10.0 / 110.0).epsilon(1e-15));
  sc.received("y");
  sc.screened("y", true);
  sc.counted("y", 20, 21);
  CHECK(sc.plates.at("y").state == State::auto_approved);
}

TEST_CASE("transition function rejects out-of-order events", "[orchestrator]") {
  Script sc;
  sc.received("x");
  CHECK(code_of([&] { sc.received("x"); }) == ErrorCode::conflict);
  CHECK(code_of([&] { sc.counted("x", 1, 1); }) == ErrorCode::illegal_transition);
  sc.invalid("x");
  CHECK(sc.plates.at("x").state == State::escalated);
  // An invalid plate can never be counted.
  CHECK(code_of([&] { sc.counted("x", 1, 1); }) == ErrorCode::illegal_transition);
  CHECK(code_of([&] { sc.screened("ghost", true); }) == ErrorCode::not_found);
  sc.received("y");
  sc.screened("y", true);
  sc.counted("y", 4, 4);
  CHECK(is_terminal(sc.plates.at("y").state));
  CHECK(code_of([&] { sc.screened("y", true); }) == ErrorCode::illegal_transition);
  CHECK(code_of([&] {
          sc.emit("escalated", {{"plate_id", "y"}, {"cause", "latency"}, {"reason", "late"}, {"latency_ms", 1.0}});
        }) == ErrorCode::illegal_transition);
}

TEST_CASE("expert verdicts close escalated plates", "[orchestrator]") {
  Scratch s("verdict");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto a = orch.submit(glare_plate(30).image, "run1").plate_id;
  const auto b = orch.submit(glare_plate(31).image, "run1").plate_id;
  orch.process_plate(a);
  orch.process_plate(b);

  const auto approved = orch.submit_expert_verdict(verdict(a, 104));
  CHECK(approved.state == State::human_approved);
  REQUIRE(approved.expert.has_value());
  CHECK(approved.expert->final_count == 104);
  CHECK(approved.expert->timestamp.size() == 24);
  const auto fb = st.records(store::Segment::feedback);
  REQUIRE(fb.size() == 1);
  CHECK(fb[0].at("verdict").at("final_count") == 104);
  CHECK(st.audit_events().back().actor == "human:rev1");
  CHECK(st.records(store::Segment::qm_outbox).back().at("disposition") == "human");

  const auto rejected = orch.submit_expert_verdict(verdict(b, 0, PlateQuality::invalid));
  CHECK(rejected.state == State::human_rejected);
  CHECK(rejected.expert->final_count == 0);

  const auto size = st.audit_size();
  CHECK(code_of([&] { orch.submit_expert_verdict(verdict(a, 104)); }) == ErrorCode::conflict);
  CHECK(code_of([&] { orch.submit_expert_verdict(verdict(b, 3, PlateQuality::invalid)); }) == ErrorCode::validation);
  CHECK(code_of([&] { orch.submit_expert_verdict(verdict("nobody", 1)); }) == ErrorCode::not_found);
  CHECK(st.audit_size() == size);
}

TEST_CASE("verdicts on non-escalated plates are illegal", "[orchestrator]") {
  Scratch s("illegal");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto p = clean_plate(23);
  const auto id = orch.submit(p.image, "run1").plate_id;
  CHECK(code_of([&] { orch.submit_expert_verdict(verdict(id, 3)); }) == ErrorCode::illegal_transition);
  REQUIRE(orch.process_plate(id).state == State::auto_approved);
  const auto size = st.audit_size();
  CHECK(code_of([&] { orch.submit_expert_verdict(verdict(id, 3)); }) == ErrorCode::illegal_transition);
  CHECK(code_of([&] { orch.process_plate(id); }) == ErrorCode::illegal_transition);
  CHECK(code_of([&] { orch.process_plate("missing"); }) == ErrorCode::not_found);
  CHECK(st.audit_size() == size);
}

TEST_CASE("an exhausted latency budget escalates", "[orchestrator]") {
  Scratch s("latency");
  store::Store st(s.dir, quick());
  auto cfg = base_config();
  cfg.latency_budget_ms = 0.0;
  Orchestrator orch(st, cfg);
  const auto id = orch.submit(clean_plate(24).image, "run1").plate_id;
  const auto done = orch.process_plate(id);
  CHECK(done.state == State::escalated);
  CHECK(done.escalation_cause == EscalationCause::latency);
  const auto rs = orch.run_stats("run1");
  CHECK(rs.escalated_mismatch == 1);
  CHECK(rs.auto_approved + rs.escalated_mismatch + rs.escalated_invalid == rs.plates_total);
}

TEST_CASE("submission is idempotent per image", "[orchestrator]") {
  Scratch s("submit");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto img = clean_plate(25).image;
  const auto first = orch.submit(img, "run1");
  const auto again = orch.submit(img, "run1");
  CHECK(first.created);
  CHECK_FALSE(again.created);
  CHECK(again.plate_id == first.plate_id);
  CHECK(st.audit_size() == 1);
  CHECK(code_of([&] { orch.submit(clean_plate(26).image, "run1", first.plate_id); }) == ErrorCode::conflict);
  CHECK(code_of([&] { orch.submit(clean_plate(27).image, "bad run"); }) == ErrorCode::validation);
  const std::vector<std::uint8_t> junk{1, 2, 3, 4};
  CHECK(code_of([&] { orch.submit(junk, "run1"); }) == ErrorCode::validation);
  CHECK(code_of([&] { orch.submit(GrayImage(32, 32, 100), "run1"); }) == ErrorCode::validation);
  CHECK(st.audit_size() == 1);
}

TEST_CASE("run statistics partition the plates", "[orchestrator]") {
  Script sc;
  for (int i = 0; i < 5; ++i) {
    const auto id = "a" + std::to_string(i);
    sc.received(id);
    sc.screened(id, true);
    sc.counted(id, 10, 10);
  }
  for (int i = 0; i < 3; ++i) {
    const auto id = "m" + std::to_string(i);
    sc.received(id);
    sc.screened(id, true);
    sc.counted(id, 10, 20);
  }
  for (int i = 0; i < 2; ++i) {
    const auto id = "i" + std::to_string(i);
    sc.received(id);
    sc.invalid(id);
  }
  const auto rs = sc.stats();
  CHECK(rs.plates_total == 10);
  CHECK(rs.auto_approved == 5);
  CHECK(rs.escalated_mismatch == 3);
  CHECK(rs.escalated_invalid == 2);
  CHECK(rs.auto_approved + rs.escalated_mismatch + rs.escalated_invalid == rs.plates_total);
  CHECK(rs.counter_invocations == 16);
  CHECK(rs.counter_invocations_without_prescreen == 20);
  CHECK(rs.savings_fraction() == Catch::Approx(0.2));
  CHECK(rs.awaiting_review == 5);
}

TEST_CASE("bypass savings equal the invalid share", "[orchestrator]") {
  Script sc;
  for (int i = 0; i < 100; ++i) {
    const auto id = "p" + std::to_string(i);
    sc.received(id);
    if (i < 40) {
      sc.invalid(id);
    } else {
      sc.screened(id, true);
      sc.counted(id, 7, 7);
    }
  }
  CHECK(sc.stats().savings_fraction() == Catch::Approx(0.40).epsilon(1e-12));

  Script none;
  for (int i = 0; i < 10; ++i) {
    const auto id = "q" + std::to_string(i);
    none.received(id);
    none.screened(id, true);
    none.counted(id, 3, 3);
  }
  CHECK(none.stats().savings_fraction() == 0.0);
}

TEST_CASE("run stats of an unknown run is not found", "[orchestrator]") {
  Scratch s("norun");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  CHECK(code_of([&] { orch.run_stats("ghost"); }) == ErrorCode::not_found);
}

TEST_CASE("replaying the audit log rebuilds every plate", "[orchestrator]") {
  Scratch s("replay");
  std::map<std::string, PlateState> live;
  {
    store::Store st(s.dir, quick());
    Orchestrator orch(st, base_config());
    std::vector<std::string> ids;
    for (std::uint64_t seed = 40; seed < 44; ++seed) ids.push_back(orch.submit(clean_plate(seed).image, "r").plate_id);
    ids.push_back(orch.submit(glare_plate(44).image, "r").plate_id);
    std::vector<std::thread> workers;
    for (const auto& id : ids) workers.emplace_back([&orch, id] { orch.process_plate(id); });
    for (auto& w : workers) w.join();
    orch.submit_expert_verdict(verdict(ids.back(), 0, PlateQuality::invalid));
    live = orch.snapshot();
    CHECK(replay(st.audit_events()) == live);
    CHECK(st.verify_audit().ok);
  }
  store::Store st(s.dir, quick());
  Orchestrator reopened(st, base_config());
  CHECK(reopened.snapshot() == live);
  for (const auto& [id, p] : live) CHECK(is_terminal(p.state));
}

TEST_CASE("review queue lists escalations oldest first", "[orchestrator]") {
  Scratch s("queue");
  store::Store st(s.dir, quick());
  Orchestrator orch(st, base_config());
  const auto a = orch.submit(glare_plate(50).image, "r").plate_id;
  const auto b = orch.submit(glare_plate(51).image, "r").plate_id;
  orch.process_plate(b);
  orch.process_plate(a);
  const auto q = orch.review_queue();
  REQUIRE(q.size() == 2);
  CHECK(q[0].plate_id == b);
  CHECK(q[1].plate_id == a);
  orch.submit_expert_verdict(verdict(b, 2));
  REQUIRE(orch.review_queue().size() == 1);
  CHECK(orch.review_queue()[0].plate_id == a);
}

TEST_CASE("recalibration needs enough feedback rows", "[orchestrator]") {
  Scratch s("fewrows");
  store::Store st(s.dir, quick());
  auto cfg = base_config();
  cfg.counter_b.peak_height = 1000.0;
  Orchestrator orch(st, cfg);
  for (std::uint64_t seed = 0, rows = 0; rows < 10; ++seed) {
    const auto p = small_plate(seed);
    if (p.truth.true_count == 0) continue;
    const auto id = orch.submit(p.image, "r").plate_id;
    REQUIRE(orch.process_plate(id).state == State::escalated);
    ++rows;
    orch.submit_expert_verdict(verdict(id, p.truth.true_count));
  }
  CHECK(orch.feedback_rows().size() == 10);
  CHECK(code_of([&] { orch.propose_recalibration(); }) == ErrorCode::insufficient_data);
  CHECK(st.records(store::Segment::calibrations).empty());
}

TEST_CASE("recalibration is proposed, then applied exactly once", "[orchestrator]") {
  Scratch s("calib");
  auto cfg = base_config();
  cfg.counter_b.peak_height = 1000.0;  // forces every valid plate into review
  CalibrationUpdate first;
  {
    store::Store st(s.dir, quick());
    Orchestrator orch(st, cfg);
    std::uint64_t rows = 0;
    for (std::uint64_t seed = 100; rows < kMinFeedbackRows; ++seed) {
      const auto p = small_plate(seed);
      if (p.truth.true_count == 0) continue;
      const auto id = orch.submit(p.image, "r").plate_id;
      REQUIRE(orch.process_plate(id).state == State::escalated);
      orch.submit_expert_verdict(verdict(id, p.truth.true_count));
      ++rows;
    }
    first = orch.propose_recalibration();
    CHECK(first.version == 1);
    CHECK(first.based_on_version == 0);
    CHECK(first.rows == kMinFeedbackRows);
    CHECK(first.loss_after() <= first.loss_before());
    // The absurd peak height is the incumbent; any grid value beats it.
    CHECK(first.counter_b_height_after != 1000.0);
    CHECK(first.loss_b_after < first.loss_b_before);
    CHECK(orch.config().counter_b.peak_height == 1000.0);

    const auto second = orch.propose_recalibration();
    CHECK(second.version == 2);
    CHECK(second.counter_b_height_after == first.counter_b_height_after);

    orch.apply_calibration(first);
    CHECK(orch.config().counter_b.peak_height == first.counter_b_height_after);
    CHECK(orch.applied_calibration_version() == 1);
    CHECK(code_of([&] { orch.apply_calibration(first); }) == ErrorCode::conflict);
    CHECK(code_of([&] { orch.apply_calibration(second); }) == ErrorCode::conflict);
    auto bogus = first;
    bogus.version = 99;
    CHECK(code_of([&] { orch.apply_calibration(bogus); }) == ErrorCode::not_found);
  }
  store::Store st(s.dir, quick());
  Orchestrator reopened(st, cfg);
  CHECK(reopened.config().counter_b.peak_height == first.counter_b_height_after);
  CHECK(reopened.applied_calibration_version() == 1);
}

TEST_CASE("calibration search keeps the incumbent when nothing improves", "[orchestrator]") {
  std::vector<FeedbackRow> rows;
  for (std::uint64_t seed = 0; rows.size() < kMinFeedbackRows; ++seed) {
    const auto p = small_plate(seed);
    rows.push_back({p.image, verdict("p" + std::to_string(seed), p.truth.true_count)});
  }
  auto cfg = base_config();
  const auto u = search_calibration(rows, cfg);
  CHECK(u.loss_after() <= u.loss_before());
  // Re-searching from the result finds nothing strictly better.
  cfg.counter_a.binarize_fraction = u.counter_a_fraction_after;
  cfg.counter_b.peak_height = u.counter_b_height_after;
  const auto again = search_calibration(rows, cfg);
  CHECK_FALSE(again.changed());
  CHECK(again.loss_after() == again.loss_before());
  CHECK(again.loss_before() == Catch::Approx(u.loss_after()).epsilon(1e-12));
}

TEST_CASE("promotion installs a classifier that survives a restart", "[orchestrator]") {
  Scratch s("promote");
  std::vector<registry::LabeledSample> data;
  for (int i = 0; i < 20; ++i) {
    const double j = i / 20.0;
    data.push_back({{80 + 40 * j, 0.97, 70 + 5 * j, 10 * j, 0.1}, ColonyClass::bacteria});
    data.push_back({{900 + 200 * j, 0.6, 110 + 5 * j, 200 + 20 * j, 0.6}, ColonyClass::mold});
  }
  std::string promoted;
  {
    store::Store st(s.dir, quick());
    Orchestrator orch(st, base_config());
    CHECK(code_of([&] {
            const std::vector<registry::LiveObservation> w(20);
            orch.monitor_live(w);
          }) == ErrorCode::insufficient_data);
    const auto cands = registry::default_candidates();
    promoted = orch.train_and_promote(data, cands, 1).candidate_id;
    CHECK(orch.config().counter_a.classifier != nullptr);
    CHECK(orch.promotions().size() == 1);

    std::vector<registry::LiveObservation> wrong;
    for (int i = 0; i < 10; ++i) wrong.push_back({ColonyClass::mold, ColonyClass::bacteria});
    for (int i = 0; i < 10; ++i) wrong.push_back({ColonyClass::bacteria, ColonyClass::mold});
    const auto before = st.audit_size();
    CHECK(orch.monitor_live(wrong).degraded);
    CHECK(st.audit_size() == before + 1);
    CHECK(st.audit_events().back().action == "retraining_trigger");
  }
  store::Store st(s.dir, quick());
  Orchestrator reopened(st, base_config());
  CHECK(reopened.config().counter_a.classifier != nullptr);
  const auto log = reopened.promotions();
  CHECK(registry::current_model_id(log) == promoted);
}
