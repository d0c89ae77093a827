#pragma once

// File-backed persistence. Layout under the store directory:
//
//   images/<sha256>.png   content-addressed plate images
//   audit.ndjson          hash-chained audit log, one canonical JSON event per line
//   audit.index           {"count": n, "head": "<hex>"} written after every append
//   plates.ndjson         plate registrations
//   feedback.ndjson       expert verdicts
//   promotions.ndjson     registry promotion records
//   calibrations.ndjson   proposed and applied counter configurations
//   qm_outbox.ndjson      QM records appended as plates are approved
//
// Every append is a single write(2) of a complete line followed by fsync; a
// failed write is rolled back with ftruncate so a partial line never survives.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/clock.hpp"
#include "cfu/error.hpp"
#include "cfu/sha256.hpp"

namespace cfu::store {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Audit events
// ---------------------------------------------------------------------------

struct AuditEvent {
  std::uint64_t sequence_no = 0;
  std::string timestamp;
  std::string actor;
  std::string action;
  nlohmann::json payload = nlohmann::json::object();
  Digest prev_hash = kZeroDigest;
  Digest this_hash = kZeroDigest;

  friend bool operator==(const AuditEvent&, const AuditEvent&) = default;
};

/// Actors: screener, counter_a, counter_b, consensus, system, human:<reviewer_id>.
inline bool valid_actor(std::string_view a) {
  if (a == "screener" || a == "counter_a" || a == "counter_b" || a == "consensus" || a == "system") return true;
  return a.starts_with("human:") && a.size() > 6;
}

/// Hashed body: every non-hash field, keys sorted, no whitespace.
inline std::string canonical_body(const AuditEvent& e) {
  const nlohmann::json body{{"action", e.action},
                            {"actor", e.actor},
                            {"payload", e.payload},
                            {"sequence_no", e.sequence_no},
                            {"timestamp", e.timestamp}};
  return body.dump();
}

inline Digest chain_hash(const Digest& prev, std::string_view body) { return sha256({prev, as_bytes(body)}); }

/// The exact line stored in audit.ndjson (without the trailing newline).
inline std::string serialize(const AuditEvent& e) {
  const nlohmann::json j{{"action", e.action},
                         {"actor", e.actor},
                         {"payload", e.payload},
                         {"prev_hash", to_hex(e.prev_hash)},
                         {"sequence_no", e.sequence_no},
                         {"this_hash", to_hex(e.this_hash)},
                         {"timestamp", e.timestamp}};
  return j.dump();
}

inline nlohmann::json to_json(const AuditEvent& e) { return nlohmann::json::parse(serialize(e)); }

/// Parses one stored line; nullopt unless it is well-formed, has exactly the
/// expected fields, and re-serializes to the identical bytes.
inline std::optional<AuditEvent> parse_event(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (!j.is_object() || j.size() != 7) return std::nullopt;
  try {
    AuditEvent e;
    if (!j.at("sequence_no").is_number_unsigned()) return std::nullopt;
    e.sequence_no = j.at("sequence_no").get<std::uint64_t>();
    e.timestamp = j.at("timestamp").get<std::string>();
    e.actor = j.at("actor").get<std::string>();
    e.action = j.at("action").get<std::string>();
    e.payload = j.at("payload");
    if (!from_hex(j.at("prev_hash").get<std::string>(), e.prev_hash)) return std::nullopt;
    if (!from_hex(j.at("this_hash").get<std::string>(), e.this_hash)) return std::nullopt;
    if (serialize(e) != line) return std::nullopt;
    return e;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

struct VerifyResult {
  bool ok = true;
  std::optional<std::uint64_t> first_bad_sequence_no;
  std::uint64_t events = 0;
  std::optional<std::uint64_t> index_count;
  bool count_mismatch = false;
  std::string message;
};

inline nlohmann::json to_json(const VerifyResult& v) {
  nlohmann::json j{{"ok", v.ok},
                   {"events", v.events},
                   {"count_mismatch", v.count_mismatch},
                   {"message", v.message},
                   {"first_bad_sequence_no", nullptr},
                   {"index_count", nullptr}};
  if (v.first_bad_sequence_no) j["first_bad_sequence_no"] = *v.first_bad_sequence_no;
  if (v.index_count) j["index_count"] = *v.index_count;
  return j;
}

/// Recomputes the whole chain over raw log bytes. Line k must hold event k;
/// the first line failing any check (format, sequence, link, hash) is
/// reported as first_bad_sequence_no = k.
inline VerifyResult verify_chain(std::string_view log, std::vector<AuditEvent>* parsed = nullptr) {
  VerifyResult r;
  Digest prev = kZeroDigest;
  std::uint64_t k = 0;
  std::size_t pos = 0;
  while (pos < log.size()) {
    const auto nl = log.find('\n', pos);
    auto bad = [&](const std::string& why) {
      r.ok = false;
      r.first_bad_sequence_no = k;
      r.message = "event " + std::to_string(k) + ": " + why;
      return r;
    };
    if (nl == std::string_view::npos) return bad("unterminated line");
    const auto line = log.substr(pos, nl - pos);
    const auto ev = parse_event(line);
    if (!ev) return bad("malformed or non-canonical record");
    if (ev->sequence_no != k) return bad("sequence gap");
    if (ev->prev_hash != prev) return bad("prev_hash does not link to the preceding event");
    if (!valid_actor(ev->actor)) return bad("unknown actor");
    if (chain_hash(prev, canonical_body(*ev)) != ev->this_hash) return bad("hash mismatch");
    prev = ev->this_hash;
    if (parsed) parsed->push_back(*ev);
    ++k;
    pos = nl + 1;
  }
  r.events = k;
  r.message = "chain intact";
  return r;
}

// ---------------------------------------------------------------------------
// Durable append-only files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(ErrorCode::storage, "cannot read " + p.string());
  return ss.str();
}

inline void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

/// Appends `line` plus '\n' to `path`; on failure the file is cut back to
/// its previous length.
inline void durable_append(const fs::path& path, std::string_view line, bool sync) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorCode::storage, "cannot open " + path.string() + ": " + std::strerror(errno));
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    fail(ErrorCode::storage, "cannot stat " + path.string());
  }
  std::string buf(line);
  buf.push_back('\n');
  std::size_t done = 0;
  while (done < buf.size()) {
    const auto n = ::write(fd, buf.data() + done, buf.size() - done);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      const std::string why = std::strerror(errno);
      [[maybe_unused]] const int rc = ::ftruncate(fd, st.st_size);
      ::close(fd);
      fail(ErrorCode::storage, "write to " + path.string() + " failed: " + why);
    }
    done += static_cast<std::size_t>(n);
  }
  if (sync && ::fsync(fd) != 0) {
    [[maybe_unused]] const int rc = ::ftruncate(fd, st.st_size);
    ::close(fd);
    fail(ErrorCode::storage, "fsync of " + path.string() + " failed");
  }
  ::close(fd);
}

/// Whole-file replace via a temporary and rename.
inline void atomic_write(const fs::path& path, std::string_view bytes, bool sync) {
  const fs::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorCode::storage, "cannot open " + tmp.string() + ": " + std::strerror(errno));
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      ::close(fd);
      fail(ErrorCode::storage, "write to " + tmp.string() + " failed");
    }
    done += static_cast<std::size_t>(n);
  }
  if (sync) ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::storage, "rename to " + path.string() + " failed: " + ec.message());
  if (sync) fsync_dir(path.parent_path());
}

inline std::vector<nlohmann::json> read_ndjson(const fs::path& p) {
  std::vector<nlohmann::json> out;
  const auto text = read_all(p);
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();  // torn tail: ignored below if unparsable
    const auto line = std::string_view(text).substr(pos, nl - pos);
    if (!line.empty()) {
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception&) {
        if (nl != text.size()) fail(ErrorCode::storage, "corrupt record in " + p.string());
      }
    }
    pos = nl + 1;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

enum class Segment { plates, feedback, promotions, calibrations, qm_outbox };

inline std::string_view segment_file(Segment s) {
  switch (s) {
    case Segment::plates: return "plates.ndjson";
    case Segment::feedback: return "feedback.ndjson";
    case Segment::promotions: return "promotions.ndjson";
    case Segment::calibrations: return "calibrations.ndjson";
    case Segment::qm_outbox: return "qm_outbox.ndjson";
  }
  return "plates.ndjson";
}

struct StoreOptions {
  bool fsync = true;
  Clock clock = system_clock();
};

class Store {
 public:
  explicit Store(fs::path dir, StoreOptions opts = {}) : dir_(std::move(dir)), opts_(std::move(opts)) {
    std::error_code ec;
    fs::create_directories(dir_ / "images", ec);
    if (ec) fail(ErrorCode::storage, "cannot create store at " + dir_.string() + ": " + ec.message());
    load_audit();
    for (auto s : {Segment::plates, Segment::feedback, Segment::promotions, Segment::calibrations, Segment::qm_outbox}) {
      segments_[s] = detail::read_ndjson(dir_ / std::string(segment_file(s)));
    }
  }

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const fs::path& dir() const { return dir_; }
  fs::path audit_path() const { return dir_ / "audit.ndjson"; }
  fs::path index_path() const { return dir_ / "audit.index"; }

  /// Current time from the injected clock, never earlier than the last
  /// audit timestamp.
  std::string now() {
    std::lock_guard lk(mu_);
    return now_locked();
  }

  // -- images ---------------------------------------------------------------

  /// Stores PNG bytes under their SHA-256; returns the hex digest.
  std::string put_image(std::span<const std::uint8_t> png) {
    const auto hex = to_hex(sha256(png));
    const auto path = image_path(hex);
    std::lock_guard lk(image_mu_);
    if (!fs::exists(path)) detail::atomic_write(path, {reinterpret_cast<const char*>(png.data()), png.size()}, opts_.fsync);
    return hex;
  }

  bool has_image(const std::string& sha) const { return fs::exists(image_path(sha)); }

  std::vector<std::uint8_t> image_bytes(const std::string& sha) const {
    Digest d;
    if (!from_hex(sha, d) || !has_image(sha)) fail(ErrorCode::not_found, "image " + sha + " not found");
    const auto text = detail::read_all(image_path(sha));
    return {text.begin(), text.end()};
  }

  fs::path image_path(const std::string& sha) const { return dir_ / "images" / (sha + ".png"); }

  // -- audit ----------------------------------------------------------------

  AuditEvent append_audit(const std::string& actor, const std::string& action, nlohmann::json payload) {
    require(valid_actor(actor), "actor", "must be screener, counter_a, counter_b, consensus, system or human:<id>");
    require(!action.empty(), "action", "must be non-empty");
    std::lock_guard lk(mu_);
    if (!writable_) fail(ErrorCode::storage, "audit log is not appendable: " + open_problem_);
    AuditEvent e;
    e.sequence_no = events_.size();
    e.timestamp = now_locked();
    e.actor = actor;
    e.action = action;
    e.payload = std::move(payload);
    e.prev_hash = events_.empty() ? kZeroDigest : events_.back().this_hash;
    e.this_hash = chain_hash(e.prev_hash, canonical_body(e));
    detail::durable_append(audit_path(), serialize(e), opts_.fsync);
    events_.push_back(e);
    last_timestamp_ = e.timestamp;
    write_index();
    return e;
  }

  std::vector<AuditEvent> audit_events() const {
    std::lock_guard lk(mu_);
    return events_;
  }

  std::size_t audit_size() const {
    std::lock_guard lk(mu_);
    return events_.size();
  }

  /// Full recomputation from the bytes on disk, compared with the index.
  VerifyResult verify_audit() const {
    std::lock_guard lk(mu_);
    return verify_files();
  }

  bool appendable() const {
    std::lock_guard lk(mu_);
    return writable_;
  }

  // -- record segments --------------------------------------------------------

  void append_record(Segment s, const nlohmann::json& record) {
    std::lock_guard lk(mu_);
    detail::durable_append(dir_ / std::string(segment_file(s)), record.dump(), opts_.fsync);
    segments_[s].push_back(record);
  }

  std::vector<nlohmann::json> records(Segment s) const {
    std::lock_guard lk(mu_);
    return segments_.at(s);
  }

 private:
  std::string now_locked() {
    auto ts = format_iso8601(opts_.clock());
    if (ts < last_timestamp_) ts = last_timestamp_;
    return ts;
  }

  std::optional<std::uint64_t> read_index_count() const {
    const auto text = detail::read_all(index_path());
    if (text.empty()) return std::nullopt;
    try {
      return nlohmann::json::parse(text).at("count").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::storage, "corrupt audit index " + index_path().string());
    }
  }

  VerifyResult verify_files(std::vector<AuditEvent>* parsed = nullptr) const {
    const auto log = detail::read_all(audit_path());
    auto r = verify_chain(log, parsed);
    r.index_count = read_index_count();
    if (r.ok && r.index_count && *r.index_count != r.events) {
      r.count_mismatch = true;
      r.message = "chain intact over " + std::to_string(r.events) + " events but the index records " +
                  std::to_string(*r.index_count);
    }
    return r;
  }

  void load_audit() {
    std::vector<AuditEvent> parsed;
    const auto r = verify_files(&parsed);
    events_ = std::move(parsed);
    if (!events_.empty()) last_timestamp_ = events_.back().timestamp;
    if (!r.ok) {
      writable_ = false;
      open_problem_ = r.message;
    } else if (r.index_count && *r.index_count > r.events) {
      writable_ = false;
      open_problem_ = "sequence gap: index records " + std::to_string(*r.index_count) + " events, log holds " +
                      std::to_string(r.events);
    } else if (!r.index_count || *r.index_count < r.events) {
      // The log is written ahead of the index; a crash between the two
      // leaves the index behind, which is repaired here.
      write_index();
    }
  }

  void write_index() {
    const nlohmann::json idx{{"count", events_.size()},
                             {"head", to_hex(events_.empty() ? kZeroDigest : events_.back().this_hash)}};
    detail::atomic_write(index_path(), idx.dump() + "\n", opts_.fsync);
  }

  fs::path dir_;
  StoreOptions opts_;
  mutable std::mutex mu_;
  std::mutex image_mu_;
  std::vector<AuditEvent> events_;
  std::string last_timestamp_;
  bool writable_ = true;
  std::string open_problem_;
  std::map<Segment, std::vector<nlohmann::json>> segments_;
};

// ---------------------------------------------------------------------------
// QM export
// ---------------------------------------------------------------------------

struct ClassCounts {
  std::uint32_t bacteria = 0;
  std::uint32_t mold = 0;
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

enum class Disposition { automatic, human };

inline std::string_view to_string(Disposition d) { return d == Disposition::automatic ? "auto" : "human"; }

struct QmExportRecord {
  std::string plate_id;
  std::uint32_t final_count = 0;
  std::string final_quality = "valid";
  ClassCounts class_counts;
  Disposition disposition = Disposition::automatic;
  std::vector<std::uint64_t> decision_trace_ids;  // audit sequence numbers
  std::string export_timestamp;
};

inline nlohmann::json to_json(const QmExportRecord& r) {
  return {{"plate_id", r.plate_id},
          {"final_count", r.final_count},
          {"final_quality", r.final_quality},
          {"class_counts", {{"bacteria", r.class_counts.bacteria}, {"mold", r.class_counts.mold}}},
          {"disposition", std::string(to_string(r.disposition))},
          {"decision_trace_ids", r.decision_trace_ids},
          {"export_timestamp", r.export_timestamp}};
}

inline constexpr std::string_view kQmCsvHeader =
    "plate_id,final_count,final_quality,bacteria,mold,disposition,decision_trace_ids,export_timestamp";

struct QmExportFiles {
  fs::path ndjson;
  fs::path csv;
  std::size_t records = 0;
};

/// Writes <out>/<run_id>.ndjson and <out>/<run_id>.csv, records ordered by
/// plate_id. Identical inputs give byte-identical files.
inline QmExportFiles write_qm_export(std::vector<QmExportRecord> records, const std::string& run_id,
                                     const fs::path& out, bool sync = true) {
  std::sort(records.begin(), records.end(),
            [](const QmExportRecord& a, const QmExportRecord& b) { return a.plate_id < b.plate_id; });
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].plate_id == records[i - 1].plate_id) {
      fail(ErrorCode::conflict, "duplicate export record for plate " + records[i].plate_id);
    }
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorCode::storage, "cannot create " + out.string() + ": " + ec.message());
  std::string nd, csv(kQmCsvHeader);
  csv += '\n';
  for (const auto& r : records) {
    nd += to_json(r).dump() + '\n';
    std::string trace;
    for (std::size_t i = 0; i < r.decision_trace_ids.size(); ++i) {
      if (i) trace += ';';
      trace += std::to_string(r.decision_trace_ids[i]);
    }
    csv += r.plate_id + ',' + std::to_string(r.final_count) + ',' + r.final_quality + ',' +
           std::to_string(r.class_counts.bacteria) + ',' + std::to_string(r.class_counts.mold) + ',' +
           std::string(to_string(r.disposition)) + ',' + trace + ',' + r.export_timestamp + '\n';
  }
  QmExportFiles files{out / (run_id + ".ndjson"), out / (run_id + ".csv"), records.size()};
  detail::atomic_write(files.ndjson, nd, sync);
  detail::atomic_write(files.csv, csv, sync);
  return files;
}

}  // namespace cfu::store
