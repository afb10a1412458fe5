#pragma once

// Append-only JSON-lines transcripts in Cowrie's event style, plus Cowrie
// log ingestion into replay corpora.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "decoysh/domain.hpp"

namespace decoysh {

inline constexpr std::string_view kEventConnect = "cowrie.session.connect";
inline constexpr std::string_view kEventLogin = "cowrie.login.success";
inline constexpr std::string_view kEventCommand = "cowrie.command.input";
inline constexpr std::string_view kEventClosed = "cowrie.session.closed";

struct TurnRecord {
  int index = 0;  // 1-based turn ordinal, failures included
  std::string query;
  std::optional<std::string> answer;
  std::optional<FailureCause> failure;
  std::string state_change;
  std::optional<int> impact;
  std::int64_t latency_ms = 0;
  int retry_count = 0;
  std::vector<std::string> technique_tags;
  Timestamp timestamp{};

  bool responded() const { return answer.has_value(); }
  bool operator==(const TurnRecord&) const = default;
};

struct SessionRecord {
  std::string session_id;
  std::string peer;
  Timestamp started_at{};
  std::optional<Timestamp> ended_at;
  std::string end_reason;
  std::string profile_digest;
  std::optional<std::string> username;
  std::vector<TurnRecord> turns;

  bool operator==(const SessionRecord&) const = default;
};

/// Thrown for schema-mismatched input files; the message carries
/// "file:line: problem".
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Compact one-line JSON; invalid UTF-8 from attackers is replaced, not
/// rejected.
std::string compact_line(const nlohmann::json& j);

// Event encoding, one JSON object per line.
nlohmann::json connect_event(const SessionRecord& header);
nlohmann::json login_event(std::string_view session_id, Timestamp t, std::string_view username,
                           std::string_view password);
nlohmann::json turn_event(std::string_view session_id, const TurnRecord& turn);
nlohmann::json close_event(std::string_view session_id, Timestamp started, Timestamp ended,
                           std::string_view reason);

/// Destination for live transcripts. Implementations accept concurrent
/// callers; each call returns false on I/O failure instead of throwing.
class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual bool write(const nlohmann::json& event) = 0;

  bool open_session(const SessionRecord& header) { return write(connect_event(header)); }
  bool append_turn(std::string_view session_id, const TurnRecord& turn) {
    return write(turn_event(session_id, turn));
  }
  bool close_session(std::string_view session_id, Timestamp started, Timestamp ended, std::string_view reason) {
    return write(close_event(session_id, started, ended, reason));
  }
};

/// Serializes all writers onto one file descriptor per output file. Every
/// line goes out in a single write() (plus fdatasync when durable), so the
/// file is valid JSON-lines at every prefix.
class JsonlSink final : public RecordSink {
 public:
  enum class Rotation { PerRun, PerDay };

  /// PerRun: `target` is the file. PerDay: `target` is a directory holding
  /// transcript-YYYY-MM-DD.jsonl, chosen by the event timestamp.
  JsonlSink(std::filesystem::path target, Rotation rotation = Rotation::PerRun, bool durable = true);
  ~JsonlSink() override;
  JsonlSink(const JsonlSink&) = delete;
  JsonlSink& operator=(const JsonlSink&) = delete;

  bool write(const nlohmann::json& event) override;

  /// Files written so far.
  std::vector<std::filesystem::path> files() const;

 private:
  std::filesystem::path path_for(const nlohmann::json& event) const;

  std::filesystem::path target_;
  Rotation rotation_;
  bool durable_;
  mutable std::mutex mu_;
  std::map<std::filesystem::path, int> fds_;
};

struct TranscriptLoad {
  std::vector<SessionRecord> records;  // in order of first appearance
  std::size_t malformed_lines = 0;
  std::size_t truncated_tail = 0;  // partial final line from an interrupted write
};

/// Rebuilds session records from transcript files. Non-strict mode skips
/// and counts malformed lines; strict mode throws InputError, except for a
/// trailing line without newline, which is a crash residue.
TranscriptLoad load_transcripts(const std::vector<std::filesystem::path>& files, bool strict = false);
TranscriptLoad parse_transcript_text(std::string_view text, bool strict = false, std::string_view name = "<memory>");

void write_records(const std::filesystem::path& file, const std::vector<SessionRecord>& records);

// ---------------------------------------------------------------------------
// Replay corpora

struct CorpusSession {
  std::string source_id;
  std::vector<std::string> commands;

  bool operator==(const CorpusSession&) const = default;
};

struct ReplayCorpus {
  std::vector<CorpusSession> sessions;
  std::string provenance;

  std::size_t command_count() const;
  bool operator==(const ReplayCorpus&) const = default;
};

nlohmann::json to_json(const ReplayCorpus& corpus);
/// Throws InputError naming the offending JSON path.
ReplayCorpus corpus_from_json(const nlohmann::json& j);
ReplayCorpus load_corpus(const std::filesystem::path& file);
void save_corpus(const std::filesystem::path& file, const ReplayCorpus& corpus);

struct IngestSummary {
  std::size_t files = 0;
  std::size_t lines = 0;
  std::size_t malformed_lines = 0;
  std::size_t events = 0;
  std::size_t command_events = 0;
  std::size_t sessions_seen = 0;
  std::size_t sessions_kept = 0;
  std::size_t sessions_dropped = 0;
  std::size_t commands_kept = 0;

  bool operator==(const IngestSummary&) const = default;
};

nlohmann::json to_json(const IngestSummary& s);

struct IngestResult {
  ReplayCorpus corpus;
  IngestSummary summary;
};

struct NamedText {
  std::string name;
  std::string text;
};

/// Groups Cowrie events by session, keeps command-input events in
/// timestamp order (file order on ties) and drops sessions without commands.
IngestResult ingest_cowrie(const std::vector<NamedText>& logs);
IngestResult ingest_cowrie_files(const std::vector<std::filesystem::path>& files);

using DedupeKey = std::function<std::string(const CorpusSession&)>;

/// Key identical for byte-identical command sequences.
DedupeKey exact_sequence_policy();

struct DedupeResult {
  ReplayCorpus corpus;
  std::size_t before = 0;
  std::size_t after = 0;
  std::size_t removed() const { return before - after; }
};

/// Keeps the first session for each key.
DedupeResult dedupe_corpus(const ReplayCorpus& corpus, const DedupeKey& policy = exact_sequence_policy());

}  // namespace decoysh
