#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "cfu/config.hpp"

using namespace cfu;

namespace {

Error error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected cfu::Error");
  return Error(ErrorCode::storage, "unreachable");
}

}  // namespace

TEST_CASE("config text round trips every field", "[config]") {
  PipelineConfig c;
  c.screener.speckle_max = 512.25;
  c.counter_a.binarize_fraction = 0.7;
  c.counter_a.min_area = 20;
  c.counter_b.peak_height = 3.5;
  c.delta = 0.1;
  c.loss = {1.0, 0.0};
  c.live_window = 40;
  c.fsync = false;
  const auto back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
  CHECK(back.counter_a.min_area == 20);
  CHECK(back.delta == 0.1);
  CHECK_FALSE(back.fsync);
  CHECK(to_json(back) == to_json(c));
}

TEST_CASE("config parser ignores comments and blank lines", "[config]") {
  const auto c = parse_config("# header\n\n  consensus.delta = 0.07   # wider gate\ncounter_b.nms_radius=4\n");
  CHECK(c.delta == 0.07);
  CHECK(c.counter_b.nms_radius == 4.0);
  CHECK(c.counter_a.binarize_fraction == PipelineConfig{}.counter_a.binarize_fraction);
}

TEST_CASE("config errors name the offending key", "[config]") {
  const auto unknown = error_of([] { parse_config("counter_c.gain = 1\n"); });
  CHECK(unknown.code() == ErrorCode::validation);
  CHECK(unknown.detail().at("field") == "counter_c.gain");

  const auto bad_number = error_of([] { parse_config("consensus.delta = wide\n"); });
  CHECK(bad_number.code() == ErrorCode::validation);
  CHECK(bad_number.detail().at("field") == "consensus.delta");

  const auto out_of_range = error_of([] { parse_config("screener.glare_max = 2\n"); });
  CHECK(out_of_range.code() == ErrorCode::validation);
  CHECK(out_of_range.detail().at("field") == "glare_max");

  CHECK(error_of([] { parse_config("no equals sign\n"); }).code() == ErrorCode::validation);
  CHECK(error_of([] { parse_config("store.fsync = maybe\n"); }).code() == ErrorCode::validation);
  CHECK(error_of([] { parse_config("counter_a.min_area = -3\n"); }).code() == ErrorCode::validation);
  CHECK(error_of([] { parse_config("loss.alpha = 0\nloss.beta = 0\n"); }).code() == ErrorCode::validation);
}

TEST_CASE("config files load from disk and the token is never echoed", "[config]") {
  const auto path = std::filesystem::temp_directory_path() / ("cfu-unit-config-" + std::to_string(::getpid()));
  { std::ofstream(path) << "gateway.token = s3cret\nconsensus.delta = 0.02\n"; }
  const auto c = load_config(path);
  CHECK(c.token == "s3cret");
  CHECK(c.delta == 0.02);
  CHECK(to_text(c).find("s3cret") == std::string::npos);
  CHECK_FALSE(to_json(c).contains("gateway.token"));
  std::filesystem::remove(path);
  CHECK(error_of([&] { load_config(path); }).code() == ErrorCode::not_found);
}
