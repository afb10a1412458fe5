#include "decoysh/session_ledger.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace decoysh {

using nlohmann::json;

std::string compact_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::int64_t millis(Timestamp t) { return t.time_since_epoch().count(); }

}  // namespace

// ---------------------------------------------------------------------------
// Events

json connect_event(const SessionRecord& h) {
  return json{{"eventid", kEventConnect},
              {"session", h.session_id},
              {"timestamp", format_timestamp(h.started_at)},
              {"src_ip", h.peer},
              {"profile_digest", h.profile_digest},
              {"sensor", "decoysh"}};
}

json login_event(std::string_view session_id, Timestamp t, std::string_view username, std::string_view password) {
  return json{{"eventid", kEventLogin},
              {"session", session_id},
              {"timestamp", format_timestamp(t)},
              {"username", username},
              {"password", password}};
}

json turn_event(std::string_view session_id, const TurnRecord& t) {
  json j{{"eventid", kEventCommand},
         {"session", session_id},
         {"timestamp", format_timestamp(t.timestamp)},
         {"turn", t.index},
         {"input", t.query},
         {"state_change", t.state_change},
         {"latency_ms", t.latency_ms},
         {"retry_count", t.retry_count}};
  if (t.answer) j["output"] = *t.answer;
  if (t.failure) j["failure_cause"] = json{{"kind", to_string(t.failure->kind)}, {"detail", t.failure->detail}};
  j["impact"] = t.impact ? json(*t.impact) : json(nullptr);
  if (!t.technique_tags.empty()) j["technique_tags"] = t.technique_tags;
  return j;
}

json close_event(std::string_view session_id, Timestamp started, Timestamp ended, std::string_view reason) {
  return json{{"eventid", kEventClosed},
              {"session", session_id},
              {"timestamp", format_timestamp(ended)},
              {"end_reason", reason},
              {"duration", static_cast<double>(millis(ended) - millis(started)) / 1000.0}};
}

// ---------------------------------------------------------------------------
// JsonlSink

JsonlSink::JsonlSink(std::filesystem::path target, Rotation rotation, bool durable)
    : target_(std::move(target)), rotation_(rotation), durable_(durable) {
  std::error_code ec;
  if (rotation_ == Rotation::PerDay) {
    std::filesystem::create_directories(target_, ec);
  } else if (target_.has_parent_path()) {
    std::filesystem::create_directories(target_.parent_path(), ec);
  }
}

JsonlSink::~JsonlSink() {
  for (auto& [path, fd] : fds_) ::close(fd);
}

std::filesystem::path JsonlSink::path_for(const json& event) const {
  if (rotation_ == Rotation::PerRun) return target_;
  std::string ts = event.value("timestamp", std::string("0000-00-00"));
  return target_ / ("transcript-" + ts.substr(0, 10) + ".jsonl");
}

bool JsonlSink::write(const json& event) {
  std::string line = compact_line(event) + "\n";
  std::lock_guard lock(mu_);
  auto path = path_for(event);
  auto it = fds_.find(path);
  if (it == fds_.end()) {
    int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0640);
    if (fd < 0) return false;
    it = fds_.emplace(path, fd).first;
  }
  const char* p = line.data();
  std::size_t left = line.size();
  while (left > 0) {
    ssize_t n = ::write(it->second, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  if (durable_ && ::fdatasync(it->second) != 0) return false;
  return true;
}

std::vector<std::filesystem::path> JsonlSink::files() const {
  std::lock_guard lock(mu_);
  std::vector<std::filesystem::path> out;
  for (const auto& [path, fd] : fds_) out.push_back(path);
  return out;
}

// ---------------------------------------------------------------------------
// Transcript loading

namespace {

struct LineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Timestamp require_ts(const json& j) {
  if (!j.contains("timestamp") || !j["timestamp"].is_string()) throw LineError("missing timestamp");
  auto t = parse_timestamp(j["timestamp"].get<std::string>());
  if (!t) throw LineError("bad timestamp");
  return *t;
}

TurnRecord turn_from_event(const json& j) {
  TurnRecord t;
  t.timestamp = require_ts(j);
  if (!j.contains("turn") || !j["turn"].is_number_integer()) throw LineError("missing turn");
  t.index = j["turn"].get<int>();
  if (!j.contains("input") || !j["input"].is_string()) throw LineError("missing input");
  t.query = j["input"].get<std::string>();
  t.state_change = j.value("state_change", std::string());
  t.latency_ms = j.value("latency_ms", std::int64_t{0});
  t.retry_count = j.value("retry_count", 0);
  if (j.contains("output")) t.answer = j["output"].get<std::string>();
  if (j.contains("failure_cause")) {
    const auto& fc = j["failure_cause"];
    auto kind = failure_kind_from_string(fc.value("kind", std::string()));
    if (!kind) throw LineError("unknown failure kind");
    t.failure = FailureCause{*kind, fc.value("detail", std::string())};
  }
  if (t.answer.has_value() == t.failure.has_value()) throw LineError("turn needs exactly one of output/failure_cause");
  if (j.contains("impact") && !j["impact"].is_null()) t.impact = j["impact"].get<int>();
  if (j.contains("technique_tags")) t.technique_tags = j["technique_tags"].get<std::vector<std::string>>();
  return t;
}

}  // namespace

TranscriptLoad parse_transcript_text(std::string_view text, bool strict, std::string_view name) {
  TranscriptLoad out;
  std::unordered_map<std::string, std::size_t> by_id;
  auto record_for = [&](const std::string& id) -> SessionRecord& {
    auto [it, fresh] = by_id.emplace(id, out.records.size());
    if (fresh) {
      out.records.emplace_back();
      out.records.back().session_id = id;
    }
    return out.records[it->second];
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    bool complete = nl != std::string_view::npos;
    std::string_view line = text.substr(pos, complete ? nl - pos : std::string_view::npos);
    pos = complete ? nl + 1 : text.size();
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw LineError("not a JSON object");
      if (!j.contains("eventid") || !j.contains("session")) throw LineError("missing eventid/session");
      auto eventid = j["eventid"].get<std::string>();
      auto id = j["session"].get<std::string>();
      if (eventid == kEventConnect) {
        auto& r = record_for(id);
        r.started_at = require_ts(j);
        r.peer = j.value("src_ip", std::string());
        r.profile_digest = j.value("profile_digest", std::string());
      } else if (eventid == kEventLogin) {
        record_for(id).username = j.value("username", std::string());
      } else if (eventid == kEventCommand) {
        auto turn = turn_from_event(j);
        auto& r = record_for(id);
        if (!r.turns.empty() && turn.index <= r.turns.back().index) throw LineError("turn index not increasing");
        r.turns.push_back(std::move(turn));
      } else if (eventid == kEventClosed) {
        auto& r = record_for(id);
        r.ended_at = require_ts(j);
        r.end_reason = j.value("end_reason", std::string());
      }
    } catch (const std::exception& e) {
      if (!complete) {
        ++out.truncated_tail;
        continue;
      }
      if (strict) throw InputError(std::string(name) + ":" + std::to_string(line_no) + ": " + e.what());
      ++out.malformed_lines;
    }
  }
  return out;
}

TranscriptLoad load_transcripts(const std::vector<std::filesystem::path>& files, bool strict) {
  TranscriptLoad merged;
  // Files are parsed one at a time for diagnostics, then merged by session.
  std::unordered_map<std::string, std::size_t> by_id;
  for (const auto& f : files) {
    auto part = parse_transcript_text(read_file(f), strict, f.string());
    merged.malformed_lines += part.malformed_lines;
    merged.truncated_tail += part.truncated_tail;
    for (auto& r : part.records) {
      auto [it, fresh] = by_id.emplace(r.session_id, merged.records.size());
      if (fresh) {
        merged.records.push_back(std::move(r));
        continue;
      }
      auto& dst = merged.records[it->second];
      if (!r.peer.empty()) {
        dst.peer = r.peer;
        dst.started_at = r.started_at;
        dst.profile_digest = r.profile_digest;
      }
      if (r.username) dst.username = r.username;
      for (auto& t : r.turns) dst.turns.push_back(std::move(t));
      if (r.ended_at) {
        dst.ended_at = r.ended_at;
        dst.end_reason = r.end_reason;
      }
    }
  }
  return merged;
}

void write_records(const std::filesystem::path& file, const std::vector<SessionRecord>& records) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto& r : records) {
    out << compact_line(connect_event(r)) << '\n';
    if (r.username) out << compact_line(login_event(r.session_id, r.started_at, *r.username, "")) << '\n';
    for (const auto& t : r.turns) out << compact_line(turn_event(r.session_id, t)) << '\n';
    if (r.ended_at) out << compact_line(close_event(r.session_id, r.started_at, *r.ended_at, r.end_reason)) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Corpus

std::size_t ReplayCorpus::command_count() const {
  std::size_t n = 0;
  for (const auto& s : sessions) n += s.commands.size();
  return n;
}

json to_json(const ReplayCorpus& corpus) {
  json sessions = json::array();
  for (const auto& s : corpus.sessions) sessions.push_back({{"source_id", s.source_id}, {"commands", s.commands}});
  return json{{"provenance", corpus.provenance}, {"sessions", sessions}};
}

ReplayCorpus corpus_from_json(const json& j) {
  if (!j.is_object()) throw InputError("corpus: expected an object");
  ReplayCorpus c;
  if (j.contains("provenance")) {
    if (!j["provenance"].is_string()) throw InputError("corpus.provenance: expected a string");
    c.provenance = j["provenance"].get<std::string>();
  }
  if (!j.contains("sessions") || !j["sessions"].is_array()) throw InputError("corpus.sessions: expected an array");
  const auto& ss = j["sessions"];
  for (std::size_t i = 0; i < ss.size(); ++i) {
    const std::string where = "corpus.sessions[" + std::to_string(i) + "]";
    const auto& s = ss[i];
    if (!s.is_object() || !s.contains("source_id") || !s["source_id"].is_string()) {
      throw InputError(where + ".source_id: expected a string");
    }
    if (!s.contains("commands") || !s["commands"].is_array()) throw InputError(where + ".commands: expected an array");
    CorpusSession cs;
    cs.source_id = s["source_id"].get<std::string>();
    for (const auto& cmd : s["commands"]) {
      if (!cmd.is_string()) throw InputError(where + ".commands: expected strings");
      cs.commands.push_back(cmd.get<std::string>());
    }
    if (cs.commands.empty()) throw InputError(where + ".commands: session has no commands");
    c.sessions.push_back(std::move(cs));
  }
  return c;
}

ReplayCorpus load_corpus(const std::filesystem::path& file) {
  auto text = read_file(file);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw InputError(file.string() + ": not valid JSON");
  try {
    return corpus_from_json(j);
  } catch (const InputError& e) {
    throw InputError(file.string() + ": " + e.what());
  }
}

void save_corpus(const std::filesystem::path& file, const ReplayCorpus& corpus) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << to_json(corpus).dump(2) << '\n';
}

json to_json(const IngestSummary& s) {
  return json{{"files", s.files},
              {"lines", s.lines},
              {"malformed_lines", s.malformed_lines},
              {"events", s.events},
              {"command_events", s.command_events},
              {"sessions_seen", s.sessions_seen},
              {"sessions_kept", s.sessions_kept},
              {"sessions_dropped", s.sessions_dropped},
              {"commands_kept", s.commands_kept}};
}

// ---------------------------------------------------------------------------
// Cowrie ingestion

IngestResult ingest_cowrie(const std::vector<NamedText>& logs) {
  struct Key {
    std::int64_t micros;
    std::size_t file;
    std::size_t line;
    auto operator<=>(const Key&) const = default;
  };
  struct Pending {
    Key first;
    std::vector<std::pair<Key, std::string>> commands;
  };

  IngestResult result;
  auto& sum = result.summary;
  sum.files = logs.size();
  std::unordered_map<std::string, Pending> sessions;

  for (std::size_t f = 0; f < logs.size(); ++f) {
    std::string_view text = logs[f].text;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
      auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() : nl + 1;
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
      ++sum.lines;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("eventid") || !j["eventid"].is_string() ||
          !j.contains("session") || !j["session"].is_string()) {
        ++sum.malformed_lines;
        continue;
      }
      std::optional<std::int64_t> micros;
      if (j.contains("timestamp") && j["timestamp"].is_string()) {
        micros = parse_timestamp_micros(j["timestamp"].get<std::string>());
      }
      if (!micros) {
        ++sum.malformed_lines;
        continue;
      }
      const auto eventid = j["eventid"].get<std::string>();
      const bool is_command = eventid == kEventCommand;
      if (is_command && (!j.contains("input") || !j["input"].is_string())) {
        ++sum.malformed_lines;
        continue;
      }
      ++sum.events;
      Key key{*micros, f, line_no};
      auto [it, fresh] = sessions.try_emplace(j["session"].get<std::string>(), Pending{key, {}});
      if (!fresh && key < it->second.first) it->second.first = key;
      if (is_command) {
        ++sum.command_events;
        it->second.commands.emplace_back(key, j["input"].get<std::string>());
      }
    }
  }

  sum.sessions_seen = sessions.size();
  std::vector<std::pair<Key, CorpusSession>> kept;
  for (auto& [id, p] : sessions) {
    if (p.commands.empty()) {
      ++sum.sessions_dropped;
      continue;
    }
    std::sort(p.commands.begin(), p.commands.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    CorpusSession cs{id, {}};
    for (auto& [k, cmd] : p.commands) cs.commands.push_back(std::move(cmd));
    sum.commands_kept += cs.commands.size();
    kept.emplace_back(p.first, std::move(cs));
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second.source_id < b.second.source_id;
  });
  for (auto& [k, cs] : kept) result.corpus.sessions.push_back(std::move(cs));
  sum.sessions_kept = result.corpus.sessions.size();

  result.corpus.provenance = "cowrie ingest of " + std::to_string(logs.size()) + " file(s)";
  return result;
}

IngestResult ingest_cowrie_files(const std::vector<std::filesystem::path>& files) {
  std::vector<NamedText> logs;
  for (const auto& f : files) logs.push_back({f.string(), read_file(f)});
  auto result = ingest_cowrie(logs);
  std::string names;
  for (const auto& f : files) {
    if (!names.empty()) names += ", ";
    names += f.filename().string();
  }
  result.corpus.provenance = "cowrie ingest of " + names;
  return result;
}

DedupeKey exact_sequence_policy() {
  return [](const CorpusSession& s) {
    std::string key;
    for (const auto& c : s.commands) {
      key += std::to_string(c.size());
      key += ':';
      key += c;
    }
    return key;
  };
}

DedupeResult dedupe_corpus(const ReplayCorpus& corpus, const DedupeKey& policy) {
  DedupeResult r;
  r.before = corpus.sessions.size();
  r.corpus.provenance = corpus.provenance;
  std::unordered_set<std::string> seen;
  for (const auto& s : corpus.sessions) {
    if (seen.insert(policy(s)).second) r.corpus.sessions.push_back(s);
  }
  r.after = r.corpus.sessions.size();
  return r;
}

}  // namespace decoysh
