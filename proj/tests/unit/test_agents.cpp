#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cfu/agents.hpp"
#include "cfu/synthgen.hpp"

using namespace cfu;
using namespace cfu::agents;
using synthgen::ArtifactKind;
using synthgen::SceneSpec;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected cfu::Error");
  return ErrorCode::storage;
}

synthgen::RenderedPlate plate_with_count(std::uint32_t n) {
  SceneSpec s;
  s.colony_count_mean = n;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    s.seed = seed;
    auto p = synthgen::generate_plate(s);
    if (p.truth.true_count == n) return p;
  }
  FAIL("no plate with the requested count");
  return {};
}

struct Counts {
  std::uint32_t a, b;
  std::vector<vision::Box> boxes;
};

Counts count_both(const GrayImage& img, const std::string& id = "p") {
  const auto screened = screen(id, img);
  REQUIRE(screened.verdict.quality == PlateQuality::valid);
  const auto plate = ScreenedPlate::admit(img, screened.verdict);
  auto a = count_primary(plate);
  return {a.verdict.count, count_secondary(plate).count, std::move(a.boxes)};
}

}  // namespace

TEST_CASE("screener accepts pristine plates and names glare", "[agents]") {
  SceneSpec s;
  s.seed = 3;
  const auto clean = screen("p3", synthgen::generate_plate(s).image);
  CHECK(clean.verdict.quality == PlateQuality::valid);
  CHECK(clean.verdict.count == 0);
  CHECK(clean.verdict.agent == AgentKind::screener);

  s.artifact = {ArtifactKind::glare, 0.8};
  const auto glare = screen("p3", synthgen::generate_plate(s).image);
  CHECK(glare.verdict.quality == PlateQuality::invalid);
  CHECK(glare.verdict.reason == "glare");

  const auto white = screen("w", GrayImage(128, 128, 255));
  CHECK(white.verdict.quality == PlateQuality::invalid);
  CHECK(white.verdict.reason == "glare");
}

TEST_CASE("screener flags each artifact kind at full strength", "[agents]") {
  for (auto kind : {ArtifactKind::glare, ArtifactKind::blur, ArtifactKind::condensation}) {
    SceneSpec s;
    s.seed = 12;
    s.artifact = {kind, 0.9};
    CHECK(screen("x", synthgen::generate_plate(s).image).verdict.quality == PlateQuality::invalid);
  }
}

TEST_CASE("screener is monotone in artifact intensity", "[agents]") {
  for (auto kind : {ArtifactKind::glare, ArtifactKind::blur, ArtifactKind::condensation, ArtifactKind::contamination}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      bool seen_invalid = false;
      for (int step = 0; step <= 20; ++step) {
        SceneSpec s;
        s.seed = seed;
        s.artifact = {kind, step / 20.0};
        if (step == 0) s.artifact.kind = ArtifactKind::none;
        const bool invalid = screen("m", synthgen::generate_plate(s).image).verdict.quality == PlateQuality::invalid;
        INFO(synthgen::to_string(kind) << " seed " << seed << " step " << step);
        CHECK(!(seen_invalid && !invalid));
        seen_invalid |= invalid;
      }
    }
  }
}

TEST_CASE("screener threshold order and config validation", "[agents]") {
  ScreenerConfig c;
  vision::QualityStats st{100.0, 0.0, 10.0, 100.0};
  CHECK_FALSE(failing_metric(st, c).has_value());
  st.blur_metric = 5.0;
  CHECK(failing_metric(st, c) == "blur");
  st.speckle_energy = 1000.0;
  CHECK(failing_metric(st, c) == "condensation");
  st.contrast = 5.0;
  CHECK(failing_metric(st, c) == "low-contrast");
  st.glare_fraction = 0.5;
  CHECK(failing_metric(st, c) == "glare");
  c.glare_max = 2.0;
  CHECK(code_of([&] { screen("x", GrayImage(64, 64, 100), c); }) == ErrorCode::validation);
}

TEST_CASE("counters refuse plates that were not screened valid", "[agents]") {
  const GrayImage img(128, 128, 255);
  const auto v = screen("bad", img).verdict;
  REQUIRE(v.quality == PlateQuality::invalid);
  CHECK(code_of([&] { ScreenedPlate::admit(img, v); }) == ErrorCode::illegal_transition);
  AgentVerdict forged = v;
  forged.quality = PlateQuality::valid;
  forged.agent = AgentKind::counter_a;
  CHECK(code_of([&] { ScreenedPlate::admit(img, forged); }) == ErrorCode::illegal_transition);
}

TEST_CASE("counters see nothing on an empty plate", "[agents]") {
  SceneSpec s;
  s.seed = 1;
  s.colony_count_mean = 0;
  const auto c = count_both(synthgen::generate_plate(s).image);
  CHECK(c.a == 0);
  CHECK(c.b == 0);
  CHECK(c.boxes.empty());
}

TEST_CASE("counters match a clean plate with nine colonies", "[agents]") {
  const auto p = plate_with_count(9);
  const auto c = count_both(p.image);
  CHECK(c.a == 9);
  CHECK(c.b == 9);
  const Disc plate{256.0, 256.0, 230.0};
  for (const auto& b : c.boxes) {
    CHECK(plate.contains(b.x_min, b.y_min));
    CHECK(plate.contains(b.x_max, b.y_max));
    CHECK(b.cls != ColonyClass::unknown);
  }
}

TEST_CASE("counter A splits a fused pair", "[agents]") {
  // Fixture: exactly one overlapping pair whose centers are 1.2 to 1.6 radii
  // apart, every other colony clear of its neighbours.
  SceneSpec s;
  s.overlap_allowed = true;
  s.colony_count_mean = 8;
  s.class_mix = 0.0;
  s.colony_radius_range = {10, 12};
  std::optional<synthgen::RenderedPlate> fixture;
  for (std::uint64_t seed = 0; seed < 2000 && !fixture; ++seed) {
    s.seed = seed;
    auto p = synthgen::generate_plate(s);
    int fused = 0, crowded = 0;
    const auto& cs = p.truth.colonies;
    for (std::size_t i = 0; i < cs.size(); ++i)
      for (std::size_t j = i + 1; j < cs.size(); ++j) {
        const double d = std::hypot(cs[i].x - cs[j].x, cs[i].y - cs[j].y);
        const double rsum = cs[i].radius + cs[j].radius;
        if (d > 0.6 * rsum && d < 0.8 * rsum) ++fused;
        else if (d <= rsum + 4.0) ++crowded;
      }
    if (fused == 1 && crowded == 0) fixture = std::move(p);
  }
  REQUIRE(fixture.has_value());
  CHECK(count_both(fixture->image).a == fixture->truth.true_count);
}

TEST_CASE("blurred but valid plates still yield well-formed verdicts", "[agents]") {
  SceneSpec s;
  s.seed = 8;
  s.artifact = {ArtifactKind::blur, 0.25};
  const auto p = synthgen::generate_plate(s);
  REQUIRE(p.truth.valid);
  const auto sv = screen("b", p.image).verdict;
  AgentVerdict cleared = sv;
  cleared.quality = PlateQuality::valid;
  const auto plate = ScreenedPlate::admit(p.image, cleared);
  const auto a = count_primary(plate).verdict;
  const auto b = count_secondary(plate);
  CHECK_NOTHROW(validate(a));
  CHECK_NOTHROW(validate(b));
  CHECK(a.agent == AgentKind::counter_a);
  CHECK(b.agent == AgentKind::counter_b);
  CHECK_FALSE(a.reason.empty());
  CHECK_FALSE(b.reason.empty());
}

TEST_CASE("agents are pure functions of image and config", "[agents]") {
  const auto p = plate_with_count(12);
  const auto first = count_both(p.image);
  const auto second = count_both(p.image);
  CHECK(first.a == second.a);
  CHECK(first.b == second.b);
  CHECK(first.boxes == second.boxes);
  CHECK(screen("p", p.image).stats.blur_metric == screen("p", p.image).stats.blur_metric);
}

TEST_CASE("verdict JSON uses the four-field schema plus agent and timing", "[agents]") {
  AgentVerdict v{"plate-9", PlateQuality::valid, 14, "dt-peaks h=2.5", AgentKind::counter_b, 3.25};
  const auto j = to_json(v);
  CHECK(j.at("plate_id") == "plate-9");
  CHECK(j.at("quality") == "valid");
  CHECK(j.at("count") == 14);
  CHECK(j.at("reason") == "dt-peaks h=2.5");
  CHECK(j.at("agent") == "counter_b");
  CHECK(j.at("elapsed_ms") == 3.25);
  CHECK(verdict_from_json(j) == v);
}

TEST_CASE("invalid verdicts carry zero count and a reason", "[agents]") {
  AgentVerdict v{"p", PlateQuality::invalid, 3, "glare", AgentKind::screener, 1.0};
  CHECK(code_of([&] { validate(v); }) == ErrorCode::validation);
  v.count = 0;
  v.reason.clear();
  CHECK(code_of([&] { validate(v); }) == ErrorCode::validation);
  CHECK(code_of([] { agent_from_string("counter_c"); }) == ErrorCode::validation);
}
