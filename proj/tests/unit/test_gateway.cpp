#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <thread>
#include <unistd.h>

#include "cfu/gateway.hpp"
#include "cfu/synthgen.hpp"

using namespace cfu;
using Json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// A gateway on an ephemeral loopback port, served from a background thread.
struct Harness {
  fs::path dir;
  std::unique_ptr<store::Store> st;
  std::unique_ptr<orchestrator::Orchestrator> orch;
  std::unique_ptr<gateway::Gateway> gw;
  std::thread loop;
  int port = -1;

  explicit Harness(const std::string& tag, gateway::GatewayOptions opts = {}) {
    dir = fs::temp_directory_path() / ("cfu-unit-gw-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    st = std::make_unique<store::Store>(dir / "store", store::StoreOptions{false, stepping_clock()});
    PipelineConfig cfg;
    cfg.fsync = false;
    orch = std::make_unique<orchestrator::Orchestrator>(*st, cfg);
    gw = std::make_unique<gateway::Gateway>(*orch, std::move(opts));
    port = gw->bind_any();
    REQUIRE(port > 0);
    loop = std::thread([this] { gw->listen_after_bind(); });
    gw->wait_until_ready();
  }

  ~Harness() {
    gw->stop();
    loop.join();
    fs::remove_all(dir);
  }

  httplib::Client client(const std::string& token = {}) const {
    httplib::Client c("127.0.0.1", port);
    if (!token.empty()) c.set_bearer_token_auth(token);
    return c;
  }
};

std::string png_of(const synthgen::RenderedPlate& p) {
  const auto bytes = encode_png(p.image);
  return {bytes.begin(), bytes.end()};
}

synthgen::RenderedPlate plate(std::uint64_t seed, bool glare = false) {
  synthgen::SceneSpec s;
  s.seed = seed;
  if (glare) s.artifact = {synthgen::ArtifactKind::glare, 0.8};
  return synthgen::generate_plate(s);
}

Json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return Json::parse(r->body);
}

}  // namespace

TEST_CASE("submit and process a clean plate over HTTP", "[gateway]") {
  Harness h("clean");
  auto c = h.client();
  const auto png = png_of(plate(70));
  const auto sub = c.Post("/plates?run_id=web&plate_id=w1", png, "image/png");
  REQUIRE(sub);
  CHECK(sub->status == 201);
  CHECK(body_of(sub) == Json{{"plate_id", "w1"}, {"created", true}});
  const auto dup = c.Post("/plates?run_id=web", png, "image/png");
  CHECK(dup->status == 200);
  CHECK(body_of(dup).at("created") == false);

  const auto done = c.Post("/plates/w1/process");
  REQUIRE(done);
  CHECK(done->status == 200);
  CHECK(body_of(done).at("state") == "AUTO_APPROVED");
  CHECK(body_of(c.Get("/plates/w1")).at("terminal") == true);

  const auto img = c.Get("/plates/w1/image");
  REQUIRE(img);
  CHECK(img->status == 200);
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(img->body == png);

  const auto again = c.Post("/plates/w1/process");
  CHECK(again->status == 409);
  CHECK(body_of(again).at("code") == "illegal_transition");
}

TEST_CASE("multipart uploads are accepted", "[gateway]") {
  Harness h("multipart");
  auto c = h.client();
  httplib::MultipartFormDataItems items{{"image", png_of(plate(71)), "plate.png", "image/png"}};
  const auto r = c.Post("/plates?run_id=web", items);
  REQUIRE(r);
  CHECK(r->status == 201);
  const httplib::MultipartFormDataItems wrong{{"file", "x", "x.png", "image/png"}};
  const auto bad = c.Post("/plates", wrong);
  CHECK(bad->status == 422);
  CHECK(body_of(bad).at("code") == "validation");
}

TEST_CASE("errors map to status codes and JSON bodies", "[gateway]") {
  Harness h("errors");
  auto c = h.client();
  CHECK(c.Get("/plates/nope")->status == 404);
  CHECK(body_of(c.Get("/plates/nope")).at("code") == "not_found");
  CHECK(c.Post("/plates/nope/process")->status == 404);
  const auto verdict = c.Post("/plates/nope/verdict", R"({"reviewer_id":"r","final_count":1,"final_quality":"valid"})",
                              "application/json");
  CHECK(verdict->status == 404);
  CHECK(c.Post("/plates", "not a png", "image/png")->status == 422);
  CHECK(c.Post("/plates", "", "image/png")->status == 422);
  CHECK(c.Get("/metrics/run/ghost")->status == 404);
  CHECK(c.Get("/review/queue?limit=abc")->status == 422);
}

TEST_CASE("expert verdicts over HTTP", "[gateway]") {
  Harness h("verdict");
  auto c = h.client();
  REQUIRE(c.Post("/plates?plate_id=g1&run_id=web", png_of(plate(72, true)), "image/png")->status == 201);
  const auto esc = body_of(c.Post("/plates/g1/process"));
  CHECK(esc.at("state") == "ESCALATED");
  CHECK(esc.at("escalation").at("cause") == "invalid");

  const auto malformed = c.Post("/plates/g1/verdict", "{not json", "application/json");
  CHECK(malformed->status == 422);
  const auto missing = c.Post("/plates/g1/verdict", R"({"final_count":3})", "application/json");
  CHECK(missing->status == 422);
  CHECK(body_of(missing).at("detail").at("field") == "reviewer_id");

  const std::string v = R"({"reviewer_id":"alice","final_count":3,"final_quality":"valid","note":"ok"})";
  const auto first = c.Post("/plates/g1/verdict", v, "application/json");
  REQUIRE(first);
  CHECK(first->status == 200);
  CHECK(body_of(first).at("state") == "HUMAN_APPROVED");
  CHECK(body_of(first).at("expert_verdict").at("reviewer_id") == "alice");
  const auto second = c.Post("/plates/g1/verdict", v, "application/json");
  CHECK(second->status == 409);
  CHECK(body_of(second).at("code") == "conflict");
}

TEST_CASE("mutating routes require the bearer token", "[gateway]") {
  gateway::GatewayOptions opts;
  opts.token = "t0ken";
  Harness h("auth", opts);
  const auto png = png_of(plate(73));
  auto anon = h.client();
  const auto denied = anon.Post("/plates", png, "image/png");
  CHECK(denied->status == 401);
  CHECK(body_of(denied).at("code") == "unauthorized");
  CHECK(h.client("wrong").Post("/plates", png, "image/png")->status == 401);
  CHECK(h.st->audit_size() == 0);
  auto authed = h.client("t0ken");
  CHECK(authed.Post("/plates?plate_id=a1", png, "image/png")->status == 201);
  CHECK(anon.Post("/plates/a1/process")->status == 401);
  CHECK(anon.Post("/export/default")->status == 401);
  // Reads stay open.
  CHECK(anon.Get("/plates/a1")->status == 200);
  CHECK(anon.Get("/review/queue")->status == 200);
}

TEST_CASE("review queue pages escalations oldest first", "[gateway]") {
  Harness h("queue");
  auto c = h.client();
  for (const auto& [id, seed] : std::vector<std::pair<std::string, std::uint64_t>>{{"q1", 74}, {"q2", 75}, {"q3", 76}}) {
    REQUIRE(c.Post("/plates?plate_id=" + id, png_of(plate(seed, true)), "image/png")->status == 201);
  }
  for (const char* id : {"q2", "q3", "q1"}) REQUIRE(c.Post(std::string("/plates/") + id + "/process")->status == 200);
  const auto all = body_of(c.Get("/review/queue"));
  CHECK(all.at("total") == 3);
  REQUIRE(all.at("items").size() == 3);
  CHECK(all.at("items")[0].at("plate_id") == "q2");
  CHECK(all.at("items")[1].at("plate_id") == "q3");
  CHECK(all.at("items")[2].at("plate_id") == "q1");
  const auto& item = all.at("items")[0];
  CHECK(item.at("cause") == "invalid");
  CHECK(item.at("screener_reason") == "glare");
  CHECK(item.at("count_a").is_null());
  CHECK(item.at("image_url") == "/plates/q2/image");
  const auto page = body_of(c.Get("/review/queue?offset=1&limit=1"));
  CHECK(page.at("total") == 3);
  CHECK(page.at("offset") == 1);
  REQUIRE(page.at("items").size() == 1);
  CHECK(page.at("items")[0].at("plate_id") == "q3");
}

TEST_CASE("read routes leave the audit log untouched", "[gateway]") {
  Harness h("reads");
  auto c = h.client();
  REQUIRE(c.Post("/plates?plate_id=r1&run_id=web", png_of(plate(77)), "image/png")->status == 201);
  REQUIRE(c.Post("/plates/r1/process")->status == 200);
  const auto size = h.st->audit_size();
  CHECK(c.Get("/plates/r1")->status == 200);
  CHECK(c.Get("/plates/r1/image")->status == 200);
  CHECK(c.Get("/review/queue")->status == 200);
  const auto metrics = body_of(c.Get("/metrics/run/web"));
  CHECK(metrics.at("run_stats").at("plates_total") == 1);
  CHECK(metrics.at("report").at("plates") == 1);
  const auto verify = body_of(c.Get("/audit/verify"));
  CHECK(verify.at("ok") == true);
  CHECK(verify.at("events") == size);
  CHECK(c.Get("/openapi.json")->status == 200);
  CHECK(h.st->audit_size() == size);
}

TEST_CASE("export over HTTP writes the run files", "[gateway]") {
  Harness h("export");
  auto c = h.client();
  REQUIRE(c.Post("/plates?plate_id=e1&run_id=web", png_of(plate(78)), "image/png")->status == 201);
  CHECK(c.Post("/export/web")->status == 409);
  REQUIRE(c.Post("/plates/e1/process")->status == 200);
  const auto r = c.Post("/export/web");
  REQUIRE(r);
  CHECK(r->status == 200);
  const auto j = body_of(r);
  CHECK(j.at("records") == 1);
  CHECK(fs::exists(j.at("ndjson").get<std::string>()));
  CHECK(fs::path(j.at("csv").get<std::string>()).parent_path() == h.dir / "store" / "exports");
  CHECK(c.Post("/export/ghost")->status == 404);
}

TEST_CASE("OpenAPI document lists every route and schema", "[gateway]") {
  const auto spec = gateway::openapi_spec();
  CHECK(spec.at("openapi") == "3.0.3");
  for (const char* path : {"/plates", "/plates/{id}", "/plates/{id}/image", "/plates/{id}/process",
                           "/plates/{id}/verdict", "/review/queue", "/metrics/run/{run_id}", "/audit/verify",
                           "/export/{run_id}", "/openapi.json"}) {
    INFO(path);
    CHECK(spec.at("paths").contains(path));
  }
  for (const char* schema : {"ApiError", "AgentVerdict", "ConsensusDecision", "ExpertVerdict", "PlateState",
                             "ReviewItem", "ReviewQueue", "RunMetrics", "VerifyResult", "ExportResult",
                             "Submission"}) {
    INFO(schema);
    CHECK(spec.at("components").at("schemas").contains(schema));
  }
  // Every schema reference resolves.
  std::function<void(const Json&)> walk = [&](const Json& j) {
    if (j.is_object()) {
      if (j.contains("$ref")) {
        const auto ref = j.at("$ref").get<std::string>();
        REQUIRE(ref.rfind("#/components/schemas/", 0) == 0);
        CHECK(spec.at("components").at("schemas").contains(ref.substr(21)));
      }
      for (const auto& [k, v] : j.items()) walk(v);
    } else if (j.is_array()) {
      for (const auto& v : j) walk(v);
    }
  };
  walk(spec);
}

TEST_CASE("PlateState JSON carries the fields the OpenAPI schema requires", "[gateway]") {
  Harness h("schema");
  auto c = h.client();
  REQUIRE(c.Post("/plates?plate_id=s1", png_of(plate(79)), "image/png")->status == 201);
  const auto state = body_of(c.Post("/plates/s1/process"));
  const auto schemas = gateway::openapi_spec().at("components").at("schemas");
  for (const auto& field : schemas.at("PlateState").at("required")) {
    INFO(field);
    CHECK(state.contains(field.get<std::string>()));
  }
  for (const auto& v : state.at("verdicts"))
    for (const auto& field : schemas.at("AgentVerdict").at("required")) CHECK(v.contains(field.get<std::string>()));
}

TEST_CASE("the review UI bundle is served under /ui", "[gateway]") {
  const auto ui = fs::temp_directory_path() / ("cfu-unit-ui-bundle-" + std::to_string(::getpid()));
  fs::create_directories(ui);
  { std::ofstream(ui / "index.html") << "<html>review</html>"; }
  gateway::GatewayOptions opts;
  opts.static_dir = ui;
  {
    Harness h("ui", opts);
    const auto r = h.client().Get("/ui/index.html");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(r->body == "<html>review</html>");
  }
  fs::remove_all(ui);
}
