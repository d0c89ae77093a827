#pragma once

// HTTP/1.1 JSON API over the orchestrator. POST routes require
// "Authorization: Bearer <token>" when a token is configured.

#include <charconv>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cfu/error.hpp"
#include "cfu/orchestrator.hpp"
#include "cfu/report.hpp"

namespace cfu::gateway {

using Json = nlohmann::json;

struct GatewayOptions {
  std::string token;                        // empty disables the check
  std::filesystem::path export_dir;         // defaults to <store>/exports
  std::optional<std::filesystem::path> static_dir;  // review UI bundle, served at /ui
};

/// Queue card for one escalated plate. Mismatch and latency items carry both
/// counts and the relative delta; invalid items carry the screener reason.
inline Json review_item(const orchestrator::PlateState& p) {
  Json j{{"plate_id", p.plate_id},
         {"run_id", p.run_id},
         {"image_url", "/plates/" + p.plate_id + "/image"},
         {"cause", p.escalation_cause ? std::string(orchestrator::to_string(*p.escalation_cause)) : ""},
         {"reason", p.escalation_reason},
         {"submitted_at", p.transitions.back().timestamp},
         {"screener_reason", nullptr},
         {"count_a", nullptr},
         {"count_b", nullptr},
         {"relative_delta", nullptr},
         {"verdicts", Json::array()}};
  for (const auto& v : p.verdicts) j["verdicts"].push_back(agents::to_json(v));
  if (p.escalation_cause == orchestrator::EscalationCause::invalid) {
    j["screener_reason"] = p.escalation_reason;
  } else if (p.decision) {
    j["count_a"] = p.decision->count_a;
    j["count_b"] = p.decision->count_b;
    j["relative_delta"] = p.decision->relative_delta;
  }
  return j;
}

inline Json openapi_spec() {
  auto error_ref = Json{{"$ref", "#/components/schemas/ApiError"}};
  auto json_content = [](Json schema) { return Json{{"application/json", {{"schema", schema}}}}; };
  auto err = [&](const char* what) { return Json{{"description", what}, {"content", json_content(error_ref)}}; };
  auto ok = [&](const char* what, const char* schema) {
    return Json{{"description", what},
                {"content", json_content({{"$ref", std::string("#/components/schemas/") + schema}})}};
  };
  auto id_param = [](const char* name) {
    return Json{{"name", name}, {"in", "path"}, {"required", true}, {"schema", {{"type", "string"}}}};
  };
  const Json secured = Json::array({{{"bearer", Json::array()}}});
  Json paths;
  paths["/plates"]["post"] = {
      {"summary", "Upload a plate image (PNG, 8-bit grayscale)"},
      {"security", secured},
      {"parameters",
       {{{"name", "run_id"}, {"in", "query"}, {"schema", {{"type", "string"}, {"default", "default"}}}},
        {{"name", "plate_id"}, {"in", "query"}, {"schema", {{"type", "string"}}}}}},
      {"requestBody",
       {{"required", true}, {"content", {{"image/png", {{"schema", {{"type", "string"}, {"format", "binary"}}}}}}}}},
      {"responses",
       {{"201", ok("New plate registered", "Submission")},
        {"200", ok("Identical bytes already stored; existing id returned", "Submission")},
        {"401", err("Missing or wrong bearer token")},
        {"409", err("plate_id already used for different bytes")},
        {"422", err("Not a valid 8-bit grayscale PNG")}}}};
  paths["/plates/{id}"]["get"] = {{"summary", "Full plate state with verdicts and decision"},
                                  {"parameters", {id_param("id")}},
                                  {"responses", {{"200", ok("Plate state", "PlateState")}, {"404", err("Unknown plate")}}}};
  paths["/plates/{id}/image"]["get"] = {
      {"summary", "Stored plate image"},
      {"parameters", {id_param("id")}},
      {"responses",
       {{"200", {{"description", "PNG bytes"}, {"content", {{"image/png", {{"schema", {{"type", "string"}, {"format", "binary"}}}}}}}}},
        {"404", err("Unknown plate")}}}};
  paths["/plates/{id}/process"]["post"] = {
      {"summary", "Run screening, both counters and the consensus gate"},
      {"security", secured},
      {"parameters", {id_param("id")}},
      {"responses",
       {{"200", ok("Plate state after processing", "PlateState")},
        {"404", err("Unknown plate or missing image")},
        {"409", err("Plate is not in RECEIVED")}}}};
  paths["/plates/{id}/verdict"]["post"] = {
      {"summary", "Submit an expert verdict for an escalated plate"},
      {"security", secured},
      {"parameters", {id_param("id")}},
      {"requestBody", {{"required", true}, {"content", json_content({{"$ref", "#/components/schemas/ExpertVerdict"}})}}},
      {"responses",
       {{"200", ok("Terminal plate state", "PlateState")},
        {"404", err("Unknown plate")},
        {"409", err("Plate not escalated (illegal_transition) or already adjudicated (conflict)")},
        {"422", err("Invalid verdict body")}}}};
  paths["/review/queue"]["get"] = {
      {"summary", "Escalated plates awaiting review, oldest escalation first"},
      {"parameters",
       {{{"name", "offset"}, {"in", "query"}, {"schema", {{"type", "integer"}, {"minimum", 0}}}},
        {{"name", "limit"}, {"in", "query"}, {"schema", {{"type", "integer"}, {"minimum", 1}}}}}},
      {"responses", {{"200", ok("Queue page", "ReviewQueue")}}}};
  paths["/metrics/run/{run_id}"]["get"] = {
      {"summary", "Run statistics and evaluation report"},
      {"parameters", {id_param("run_id")}},
      {"responses", {{"200", ok("Run metrics", "RunMetrics")}, {"404", err("Unknown run")}}}};
  paths["/audit/verify"]["get"] = {{"summary", "Recompute the audit hash chain"},
                                   {"responses", {{"200", ok("Verification result", "VerifyResult")}}}};
  paths["/export/{run_id}"]["post"] = {
      {"summary", "Write the QM export (NDJSON and CSV) for a completed run"},
      {"security", secured},
      {"parameters", {id_param("run_id")}},
      {"responses",
       {{"200", ok("Export summary", "ExportResult")},
        {"404", err("Unknown run")},
        {"409", err("Run has non-terminal plates")}}}};
  paths["/openapi.json"]["get"] = {{"summary", "This document"}, {"responses", {{"200", {{"description", "OpenAPI 3 JSON"}}}}}};

  Json schemas;
  schemas["ApiError"] = {
      {"type", "object"},
      {"required", {"code", "message"}},
      {"properties",
       {{"code", {{"type", "string"},
                  {"enum", {"validation", "not_found", "conflict", "illegal_transition", "insufficient_data", "storage",
                            "unauthorized"}}}},
        {"message", {{"type", "string"}}},
        {"detail", {{"type", "object"}}}}}};
  schemas["Submission"] = {{"type", "object"},
                           {"properties", {{"plate_id", {{"type", "string"}}}, {"created", {{"type", "boolean"}}}}}};
  schemas["AgentVerdict"] = {
      {"type", "object"},
      {"required", {"plate_id", "quality", "count", "reason", "agent", "elapsed_ms"}},
      {"properties",
       {{"plate_id", {{"type", "string"}}},
        {"quality", {{"type", "string"}, {"enum", {"valid", "invalid"}}}},
        {"count", {{"type", "integer"}, {"minimum", 0}}},
        {"reason", {{"type", "string"}}},
        {"agent", {{"type", "string"}, {"enum", {"screener", "counter_a", "counter_b"}}}},
        {"elapsed_ms", {{"type", "number"}, {"minimum", 0}}}}}};
  schemas["ConsensusDecision"] = {
      {"type", "object"},
      {"properties",
       {{"count_a", {{"type", "integer"}}},
        {"count_b", {{"type", "integer"}}},
        {"relative_delta", {{"type", "number"}}},
        {"delta_threshold", {{"type", "number"}}},
        {"outcome", {{"type", "string"}, {"enum", {"auto_approve", "escalate"}}}}}}};
  schemas["ExpertVerdict"] = {
      {"type", "object"},
      {"required", {"reviewer_id", "final_count", "final_quality"}},
      {"properties",
       {{"plate_id", {{"type", "string"}}},
        {"reviewer_id", {{"type", "string"}, {"pattern", "^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$"}}},
        {"final_count", {{"type", "integer"}, {"minimum", 0}}},
        {"final_quality", {{"type", "string"}, {"enum", {"valid", "invalid"}}}},
        {"final_class_counts",
         {{"type", "object"},
          {"properties", {{"bacteria", {{"type", "integer"}, {"minimum", 0}}}, {"mold", {{"type", "integer"}, {"minimum", 0}}}}}}},
        {"note", {{"type", "string"}}},
        {"timestamp", {{"type", "string"}}}}}};
  schemas["PlateState"] = {
      {"type", "object"},
      {"required",
       {"plate_id", "run_id", "image_sha256", "state", "terminal", "verdicts", "screen_stats", "boxes", "decision",
        "escalation", "expert_verdict", "transitions", "event_ids", "latency_ms", "exported"}},
      {"properties",
       {{"plate_id", {{"type", "string"}}},
        {"run_id", {{"type", "string"}}},
        {"image_sha256", {{"type", "string"}}},
        {"state", {{"type", "string"},
                   {"enum", {"RECEIVED", "SCREENED_VALID", "SCREENED_INVALID", "COUNTED", "AUTO_APPROVED", "ESCALATED",
                             "HUMAN_APPROVED", "HUMAN_REJECTED"}}}},
        {"terminal", {{"type", "boolean"}}},
        {"verdicts", {{"type", "array"}, {"items", {{"$ref", "#/components/schemas/AgentVerdict"}}}}},
        {"screen_stats", {{"type", "object"}, {"nullable", true}}},
        {"boxes", {{"type", "array"}, {"items", {{"type", "object"}}}}},
        {"decision", {{"allOf", {{{"$ref", "#/components/schemas/ConsensusDecision"}}}}, {"nullable", true}}},
        {"escalation", {{"type", "object"}, {"nullable", true},
                        {"properties", {{"cause", {{"type", "string"}, {"enum", {"invalid", "mismatch", "latency"}}}},
                                        {"reason", {{"type", "string"}}}}}}},
        {"expert_verdict", {{"allOf", {{{"$ref", "#/components/schemas/ExpertVerdict"}}}}, {"nullable", true}}},
        {"transitions", {{"type", "array"}, {"items", {{"type", "object"}}}}},
        {"event_ids", {{"type", "array"}, {"items", {{"type", "integer"}}}}},
        {"latency_ms", {{"type", "number"}}},
        {"exported", {{"type", "boolean"}}}}}};
  schemas["ReviewItem"] = {
      {"type", "object"},
      {"properties",
       {{"plate_id", {{"type", "string"}}},
        {"run_id", {{"type", "string"}}},
        {"image_url", {{"type", "string"}}},
        {"cause", {{"type", "string"}}},
        {"reason", {{"type", "string"}}},
        {"submitted_at", {{"type", "string"}}},
        {"screener_reason", {{"type", "string"}, {"nullable", true}}},
        {"count_a", {{"type", "integer"}, {"nullable", true}}},
        {"count_b", {{"type", "integer"}, {"nullable", true}}},
        {"relative_delta", {{"type", "number"}, {"nullable", true}}},
        {"verdicts", {{"type", "array"}, {"items", {{"$ref", "#/components/schemas/AgentVerdict"}}}}}}}};
  schemas["ReviewQueue"] = {
      {"type", "object"},
      {"properties",
       {{"total", {{"type", "integer"}}},
        {"offset", {{"type", "integer"}}},
        {"items", {{"type", "array"}, {"items", {{"$ref", "#/components/schemas/ReviewItem"}}}}}}}};
  schemas["RunMetrics"] = {{"type", "object"},
                           {"properties", {{"run_stats", {{"type", "object"}}}, {"report", {{"type", "object"}}}}}};
  schemas["VerifyResult"] = {
      {"type", "object"},
      {"properties",
       {{"ok", {{"type", "boolean"}}},
        {"first_bad_sequence_no", {{"type", "integer"}, {"nullable", true}}},
        {"events", {{"type", "integer"}}},
        {"index_count", {{"type", "integer"}, {"nullable", true}}},
        {"count_mismatch", {{"type", "boolean"}}},
        {"message", {{"type", "string"}}}}}};
  schemas["ExportResult"] = {{"type", "object"},
                             {"properties",
                              {{"run_id", {{"type", "string"}}},
                               {"records", {{"type", "integer"}}},
                               {"ndjson", {{"type", "string"}}},
                               {"csv", {{"type", "string"}}}}}};
  return {{"openapi", "3.0.3"},
          {"info", {{"title", "cfuqc plate QC API"}, {"version", "1.0.0"}}},
          {"paths", paths},
          {"components",
           {{"schemas", schemas},
            {"securitySchemes", {{"bearer", {{"type", "http"}, {"scheme", "bearer"}}}}}}}};
}

class Gateway {
 public:
  Gateway(orchestrator::Orchestrator& orch, GatewayOptions opts) : orch_(orch), opts_(std::move(opts)) {
    if (opts_.export_dir.empty()) opts_.export_dir = orch_.store().dir() / "exports";
    routes();
  }

  httplib::Server& server() { return server_; }

  /// Binds to an ephemeral port on `host`; returns the port or -1.
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void send_json(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, const Error& e) { send_json(res, http_status(e.code()), e.to_json()); }

  bool authorized(const httplib::Request& req, httplib::Response& res) const {
    if (opts_.token.empty()) return true;
    if (req.get_header_value("Authorization") == "Bearer " + opts_.token) return true;
    send_json(res, 401, {{"code", "unauthorized"}, {"message", "missing or invalid bearer token"}});
    return false;
  }

  /// Wraps a handler with error mapping and, for mutating routes, the token check.
  Handler wrap(Handler h, bool mutating) {
    return [this, h = std::move(h), mutating](const httplib::Request& req, httplib::Response& res) {
      if (mutating && !authorized(req, res)) return;
      try {
        h(req, res);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const nlohmann::json::exception& e) {
        send_error(res, Error(ErrorCode::validation, std::string("malformed JSON: ") + e.what()));
      } catch (const std::exception& e) {
        send_error(res, Error(ErrorCode::storage, e.what()));
      }
    };
  }

  static std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
    if (!req.has_param(key)) return fallback;
    const auto v = req.get_param_value(key);
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
      fail(ErrorCode::validation, std::string(key) + ": expected a non-negative integer", {{"field", key}});
    }
    return out;
  }

  void routes() {
    server_.Post("/plates", wrap([this](const httplib::Request& req, httplib::Response& res) {
      std::string body = req.body;
      if (req.is_multipart_form_data()) {
        require(req.has_file("image"), "image", "multipart upload needs an 'image' part");
        body = req.get_file_value("image").content;
      }
      require(!body.empty(), "body", "PNG bytes required");
      const std::string run_id = req.has_param("run_id") ? req.get_param_value("run_id") : "default";
      std::optional<std::string> plate_id;
      if (req.has_param("plate_id")) plate_id = req.get_param_value("plate_id");
      const auto sub = orch_.submit(as_bytes(body), run_id, plate_id);
      send_json(res, sub.created ? 201 : 200, {{"plate_id", sub.plate_id}, {"created", sub.created}});
    }, true));

    server_.Post(R"(/plates/([^/]+)/process)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, orchestrator::to_json(orch_.process_plate(req.matches[1])));
    }, true));

    server_.Post(R"(/plates/([^/]+)/verdict)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      orch_.get(id);  // unknown plate is a 404 before body validation
      const auto v = orchestrator::expert_verdict_from_json(Json::parse(req.body), id);
      send_json(res, 200, orchestrator::to_json(orch_.submit_expert_verdict(v)));
    }, true));

    server_.Get(R"(/plates/([^/]+)/image)", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto p = orch_.get(req.matches[1]);
      const auto bytes = orch_.store().image_bytes(p.image_sha256);
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    }, false));

    server_.Get(R"(/plates/([^/]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, orchestrator::to_json(orch_.get(req.matches[1])));
    }, false));

    server_.Get("/review/queue", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto queue = orch_.review_queue();
      const auto offset = query_size(req, "offset", 0);
      const auto limit = query_size(req, "limit", queue.size());
      Json items = Json::array();
      for (std::size_t i = offset; i < queue.size() && i < offset + limit; ++i) items.push_back(review_item(queue[i]));
      send_json(res, 200, {{"total", queue.size()}, {"offset", offset}, {"items", items}});
    }, false));

    server_.Get(R"(/metrics/run/([^/]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const std::string run = req.matches[1];
      const auto stats = orch_.run_stats(run);
      send_json(res, 200, {{"run_stats", orchestrator::to_json(stats)}, {"report", report::for_run(orch_, run)}});
    }, false));

    server_.Get("/audit/verify", wrap([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, store::to_json(orch_.store().verify_audit()));
    }, false));

    server_.Post(R"(/export/([^/]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const std::string run = req.matches[1];
      const auto files = orch_.export_qm(run, opts_.export_dir);
      send_json(res, 200, {{"run_id", run}, {"records", files.records}, {"ndjson", files.ndjson.string()},
                           {"csv", files.csv.string()}});
    }, true));

    server_.Get("/openapi.json", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, openapi_spec());
    });

    if (opts_.static_dir) server_.set_mount_point("/ui", opts_.static_dir->string());
  }

  orchestrator::Orchestrator& orch_;
  GatewayOptions opts_;
  httplib::Server server_;
};

}  // namespace cfu::gateway
