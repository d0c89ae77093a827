// cfuqc: command-line front end for the plate QC pipeline.
//
// Exit codes: 0 success, 2 validation or usage error, 1 runtime error.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cfu/cfu.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string store_dir = "cfu-store";
  std::string config_path;
  std::optional<double> delta;
  std::string token;
  bool no_fsync = false;
};

cfu::PipelineConfig load(const Common& c) {
  auto cfg = c.config_path.empty() ? cfu::PipelineConfig{} : cfu::load_config(c.config_path);
  if (c.delta) cfg.delta = *c.delta;
  if (!c.token.empty()) cfg.token = c.token;
  if (c.no_fsync) cfg.fsync = false;
  cfu::validate(cfg);
  return cfg;
}

cfu::store::StoreOptions store_options(const cfu::PipelineConfig& cfg) {
  cfu::store::StoreOptions o;
  o.fsync = cfg.fsync;
  return o;
}

cfu::synthgen::GroundTruth read_truth(const fs::path& p) {
  std::ifstream in(p);
  if (!in) cfu::fail(cfu::ErrorCode::not_found, "ground truth not found: " + p.string());
  return cfu::synthgen::ground_truth_from_json(json::parse(in));
}

std::vector<cfu::agents::TruthColony> truth_colonies(const cfu::synthgen::GroundTruth& gt) {
  std::vector<cfu::agents::TruthColony> out;
  for (const auto& c : gt.colonies) out.push_back({c.x, c.y, c.radius, c.cls});
  return out;
}

/// Simulated reviewer that adjudicates from the generator's ground truth.
cfu::orchestrator::ExpertVerdict simulated_review(const std::string& plate_id, const cfu::synthgen::GroundTruth& gt) {
  cfu::orchestrator::ExpertVerdict v;
  v.plate_id = plate_id;
  v.reviewer_id = "auto-reviewer";
  v.final_quality = gt.valid ? cfu::PlateQuality::valid : cfu::PlateQuality::invalid;
  v.final_count = gt.valid ? gt.true_count : 0;
  if (gt.valid) {
    cfu::store::ClassCounts cc;
    for (const auto& c : gt.colonies) (c.cls == cfu::ColonyClass::mold ? cc.mold : cc.bacteria)++;
    v.final_class_counts = cc;
  }
  v.note = "simulated review from ground truth";
  return v;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) cfu::fail(cfu::ErrorCode::storage, "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

int cmd_gen(std::uint64_t seed, std::size_t count, double invalid_frac, double colony_mean, const std::string& out) {
  cfu::synthgen::SceneSpec base;
  base.colony_count_mean = colony_mean;
  const auto specs = cfu::synthgen::make_workload(seed, count, invalid_frac, base);
  auto manifest = cfu::synthgen::generate_batch(specs, out);
  const auto path = fs::path(out) / "manifest.json";
  cfu::synthgen::write_manifest(manifest, path);
  std::cout << json{{"manifest", path.string()}, {"plates", manifest.plates.size()},
                    {"invalid", manifest.invalid_count()}}.dump(2)
            << '\n';
  return 0;
}

int cmd_run(const Common& c, const std::string& manifest_path, std::string run_id, bool auto_review,
            const std::string& out) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  const auto manifest = cfu::synthgen::read_manifest(manifest_path);
  if (run_id.empty()) run_id = fs::path(manifest_path).parent_path().filename().string();
  if (!cfu::orchestrator::valid_identifier(run_id)) run_id = "default";
  for (const auto& e : manifest.plates) {
    const auto gt = read_truth(manifest.dir / e.ground_truth);
    const auto bytes = cfu::read_file_bytes(manifest.dir / e.image);
    const auto sub = orch.submit(bytes, run_id, e.plate_id, cfu::orchestrator::reference_from_truth(gt));
    auto st = orch.get(sub.plate_id);
    if (st.state == cfu::orchestrator::State::received) st = orch.process_plate(sub.plate_id);
    if (auto_review && st.state == cfu::orchestrator::State::escalated) {
      orch.submit_expert_verdict(simulated_review(sub.plate_id, gt));
    }
  }
  const auto stats = cfu::orchestrator::to_json(orch.run_stats(run_id));
  const auto report = cfu::report::for_run(orch, run_id);
  std::cout << stats.dump(2) << "\n\n" << cfu::report::render_text(report);
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "run_stats.json", stats);
    write_json(fs::path(out) / "report.json", report);
  }
  return 0;
}

int cmd_report(const Common& c, const std::string& run_id, bool as_json) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  const auto report = cfu::report::for_run(orch, run_id);
  if (as_json) {
    std::cout << report.dump(2) << '\n';
  } else {
    std::cout << cfu::report::render_text(report);
  }
  return 0;
}

int cmd_verify(const Common& c) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  const auto v = store.verify_audit();
  std::cout << cfu::store::to_json(v).dump(2) << '\n';
  return v.ok ? 0 : 1;
}

int cmd_export(const Common& c, const std::string& run_id, std::string out) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  if (out.empty()) out = (fs::path(c.store_dir) / "exports").string();
  const auto f = orch.export_qm(run_id, out);
  std::cout << json{{"run_id", run_id}, {"records", f.records}, {"ndjson", f.ndjson.string()}, {"csv", f.csv.string()}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_train(const Common& c, const std::string& manifest_path, std::uint64_t seed) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  const auto manifest = cfu::synthgen::read_manifest(manifest_path);
  std::vector<cfu::registry::LabeledSample> data;
  for (const auto& e : manifest.plates) {
    if (!e.valid) continue;
    const auto gt = read_truth(manifest.dir / e.ground_truth);
    const auto img = cfu::read_png(manifest.dir / e.image);
    const auto rows = cfu::agents::labeled_samples(img, truth_colonies(gt), cfg.counter_a);
    data.insert(data.end(), rows.begin(), rows.end());
  }
  const auto candidates = cfu::registry::default_candidates();
  const auto rec = orch.train_and_promote(data, candidates, seed);
  std::cout << cfu::registry::to_json(rec).dump(2) << '\n';
  return 0;
}

int cmd_recalibrate(const Common& c, bool apply) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  const auto u = orch.propose_recalibration();
  if (apply) orch.apply_calibration(u);
  std::cout << json{{"update", cfu::orchestrator::to_json(u)}, {"applied", apply}}.dump(2) << '\n';
  return 0;
}

cfu::gateway::Gateway* g_server = nullptr;

int cmd_serve(const Common& c, const std::string& host, int port, const std::string& static_dir) {
  const auto cfg = load(c);
  cfu::store::Store store(c.store_dir, store_options(cfg));
  cfu::orchestrator::Orchestrator orch(store, cfg);
  cfu::gateway::GatewayOptions opts;
  opts.token = cfg.token;
  if (!static_dir.empty()) opts.static_dir = fs::path(static_dir);
  cfu::gateway::Gateway gw(orch, opts);
  if (!gw.bind(host, port)) cfu::fail(cfu::ErrorCode::storage, "cannot bind " + host + ":" + std::to_string(port));
  g_server = &gw;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cerr << "listening on http://" << host << ":" << port << '\n';
  gw.listen_after_bind();
  g_server = nullptr;
  return 0;
}

int cmd_openapi(const std::string& out) {
  const auto doc = cfu::gateway::openapi_spec().dump(2) + "\n";
  if (out.empty()) {
    std::cout << doc;
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) cfu::fail(cfu::ErrorCode::storage, "cannot write " + out);
    f << doc;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfuqc: multi-agent colony count quality control"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--store", common.store_dir, "Store directory")->capture_default_str();
    sub->add_option("--config", common.config_path, "Configuration file (key = value)");
    sub->add_option("--delta", common.delta, "Consensus relative-delta threshold (default 0.05)");
    sub->add_flag("--no-fsync", common.no_fsync, "Skip fsync on appends (faster, not crash-safe)");
  };

  std::uint64_t seed = 1;
  std::size_t count = 50;
  double invalid_frac = 0.0;
  double colony_mean = 12.0;
  std::string out;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic plate batch and manifest");
  gen->add_option("--seed", seed, "Workload seed")->capture_default_str();
  gen->add_option("--count", count, "Number of plates")->capture_default_str();
  gen->add_option("--invalid-frac", invalid_frac, "Fraction of plates with a disqualifying artifact")
      ->capture_default_str();
  gen->add_option("--colony-mean", colony_mean, "Mean colonies per plate")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  std::string manifest, run_id;
  bool auto_review = false;
  auto* run = app.add_subcommand("run", "Process every plate of a manifest");
  add_common(run);
  run->add_option("--manifest", manifest, "Manifest written by gen")->required();
  run->add_option("--run-id", run_id, "Run identifier (default: manifest directory name)");
  run->add_flag("--auto-review", auto_review, "Adjudicate escalations from ground truth (simulated reviewer)");
  run->add_option("--out", out, "Directory for run_stats.json and report.json");

  bool as_json = false;
  auto* report = app.add_subcommand("report", "Print counting, screening and validation tables");
  add_common(report);
  report->add_option("--run-id", run_id, "Restrict to one run");
  report->add_flag("--json", as_json, "Emit JSON instead of tables");

  auto* verify = app.add_subcommand("verify-audit", "Recompute the audit hash chain");
  add_common(verify);

  auto* exp = app.add_subcommand("export", "Write the QM export for a completed run");
  add_common(exp);
  exp->add_option("--run-id", run_id, "Run identifier")->required();
  exp->add_option("--out", out, "Output directory (default: <store>/exports)");

  auto* train = app.add_subcommand("train", "Evaluate classifier candidates and promote the best");
  add_common(train);
  train->add_option("--manifest", manifest, "Manifest with ground truth")->required();
  train->add_option("--seed", seed, "Fold assignment seed")->capture_default_str();

  bool apply = false;
  auto* recal = app.add_subcommand("recalibrate", "Propose counter thresholds from expert feedback");
  add_common(recal);
  recal->add_flag("--apply", apply, "Apply the proposal immediately");

  std::string host = "127.0.0.1", static_dir;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Start the HTTP API");
  add_common(serve);
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--port", port, "Port")->capture_default_str();
  serve->add_option("--token", common.token, "Bearer token for mutating endpoints");
  serve->add_option("--static-dir", static_dir, "Review UI bundle served under /ui");

  auto* openapi = app.add_subcommand("openapi", "Print or write the OpenAPI document");
  openapi->add_option("--out", out, "Output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen(seed, count, invalid_frac, colony_mean, out);
    if (*run) return cmd_run(common, manifest, run_id, auto_review, out);
    if (*report) return cmd_report(common, run_id, as_json);
    if (*verify) return cmd_verify(common);
    if (*exp) return cmd_export(common, run_id, out);
    if (*train) return cmd_train(common, manifest, seed);
    if (*recal) return cmd_recalibrate(common, apply);
    if (*serve) return cmd_serve(common, host, port, static_dir);
    if (*openapi) return cmd_openapi(out);
  } catch (const cfu::Error& e) {
    std::cerr << "error: " << e.to_json().dump() << '\n';
    return e.code() == cfu::ErrorCode::validation ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
