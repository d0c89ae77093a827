#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "cfu/gateway.hpp"
#include "cfu/store.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct Invocation {
  int status;
  std::string out;
};

/// Runs cfuqc with `args`, capturing stdout; stderr goes to a side file.
Invocation cfuqc(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const std::string cmd =
      std::string("\"") + CFUQC_BINARY + "\" " + args + " > \"" + out.string() + "\" 2> \"" + (dir / "stderr.txt").string() + "\"";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, ss.str()};
}

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& tag)
      : dir(fs::temp_directory_path() / ("cfu-unit-cli-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("gen writes a manifest with the requested invalid fraction", "[cli]") {
  Scratch s("gen");
  const auto r = cfuqc(s.dir, "gen --seed 5 --count 50 --invalid-frac 0.2 --out \"" + (s.dir / "batch").string() + "\"");
  REQUIRE(r.status == 0);
  const auto summary = Json::parse(r.out);
  CHECK(summary.at("plates") == 50);
  CHECK(summary.at("invalid") == 10);
  std::ifstream in(s.dir / "batch" / "manifest.json");
  const auto manifest = Json::parse(in);
  REQUIRE(manifest.at("plates").size() == 50);
  for (const auto& e : manifest.at("plates")) {
    CHECK(fs::exists(s.dir / "batch" / e.at("image").get<std::string>()));
    CHECK(fs::exists(s.dir / "batch" / e.at("ground_truth").get<std::string>()));
  }
}

TEST_CASE("run, report, verify-audit and export work end to end", "[cli]") {
  Scratch s("run");
  const auto store = "--no-fsync --store \"" + (s.dir / "store").string() + "\"";
  REQUIRE(cfuqc(s.dir, "gen --seed 9 --count 6 --invalid-frac 0.34 --out \"" + (s.dir / "b").string() + "\"").status == 0);
  const auto run = cfuqc(s.dir, "run " + store + " --auto-review --run-id b9 --manifest \"" +
                                    (s.dir / "b" / "manifest.json").string() + "\" --out \"" + (s.dir / "o").string() + "\"");
  REQUIRE(run.status == 0);
  CHECK(run.out.find("Counting") != std::string::npos);
  std::ifstream stats_in(s.dir / "o" / "run_stats.json");
  const auto stats = Json::parse(stats_in);
  CHECK(stats.at("plates_total") == 6);

  const auto report = cfuqc(s.dir, "report " + store + " --json --run-id b9");
  REQUIRE(report.status == 0);
  CHECK(Json::parse(report.out).at("plates") == 6);

  const auto verify = cfuqc(s.dir, "verify-audit " + store);
  CHECK(verify.status == 0);
  CHECK(Json::parse(verify.out).at("ok") == true);

  const auto exp = cfuqc(s.dir, "export " + store + " --run-id b9");
  REQUIRE(exp.status == 0);
  CHECK(fs::exists(Json::parse(exp.out).at("csv").get<std::string>()));
  CHECK(cfuqc(s.dir, "export " + store + " --run-id nope").status == 1);

  // Rerunning the same manifest resubmits idempotently and appends nothing.
  const auto size = cfu::store::Store(s.dir / "store", {false, cfu::system_clock()}).audit_size();
  REQUIRE(cfuqc(s.dir, "run " + store + " --auto-review --run-id b9 --manifest \"" +
                           (s.dir / "b" / "manifest.json").string() + "\"")
              .status == 0);
  CHECK(cfu::store::Store(s.dir / "store", {false, cfu::system_clock()}).audit_size() == size);
}

TEST_CASE("report on an empty store succeeds", "[cli]") {
  Scratch s("empty");
  const auto r = cfuqc(s.dir, "report --no-fsync --store \"" + (s.dir / "store").string() + "\"");
  CHECK(r.status == 0);
  CHECK(r.out.find("Screening") != std::string::npos);
}

TEST_CASE("usage and validation errors exit with status 2", "[cli]") {
  Scratch s("usage");
  CHECK(cfuqc(s.dir, "gen --bogus").status == 2);
  CHECK(cfuqc(s.dir, "frobnicate").status == 2);
  CHECK(cfuqc(s.dir, "").status == 2);
  CHECK(cfuqc(s.dir, "gen --count 5 --invalid-frac 1.5 --out \"" + (s.dir / "x").string() + "\"").status == 2);
  CHECK(cfuqc(s.dir, "report --delta -1 --store \"" + (s.dir / "st").string() + "\"").status == 2);
}

TEST_CASE("the committed OpenAPI document matches the generator", "[cli]") {
  Scratch s("openapi");
  const auto r = cfuqc(s.dir, "openapi");
  REQUIRE(r.status == 0);
  CHECK(Json::parse(r.out) == cfu::gateway::openapi_spec());
  std::ifstream committed(fs::path(CFU_SOURCE_DIR) / "docs" / "openapi.json");
  REQUIRE(committed.good());
  CHECK(Json::parse(committed) == cfu::gateway::openapi_spec());
}
