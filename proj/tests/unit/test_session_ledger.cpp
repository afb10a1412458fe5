#include <gtest/gtest.h>

#include <thread>

#include "decoysh/session_ledger.hpp"
#include "support.hpp"

using namespace decoysh;
using namespace decoysh::test;
using nlohmann::json;

namespace {

const Timestamp kT0 = *parse_timestamp("2024-03-01T10:00:00Z");

SessionRecord sample_record() {
  SessionRecord r;
  r.session_id = "abcdef012345";
  r.peer = "198.51.100.7";
  r.started_at = kT0;
  r.profile_digest = "d1";
  r.username = "root";
  TurnRecord ok;
  ok.index = 1;
  ok.query = "uname -a";
  ok.answer = "Linux web 5.4.0\n";
  ok.impact = 0;
  ok.latency_ms = 1000;
  ok.timestamp = kT0 + std::chrono::seconds(1);
  ok.technique_tags = {"T1082"};
  TurnRecord bad;
  bad.index = 2;
  bad.query = "wget http://x";
  bad.failure = FailureCause{FailureKind::SecurityPolicy, "refused"};
  bad.retry_count = 0;
  bad.timestamp = kT0 + std::chrono::seconds(3);
  r.turns = {ok, bad};
  r.ended_at = kT0 + std::chrono::seconds(5);
  r.end_reason = "exit";
  return r;
}

std::string events_for(const SessionRecord& r) {
  std::string text = compact_line(connect_event(r)) + "\n";
  text += compact_line(login_event(r.session_id, r.started_at, *r.username, "123456")) + "\n";
  for (const auto& t : r.turns) text += compact_line(turn_event(r.session_id, t)) + "\n";
  text += compact_line(close_event(r.session_id, r.started_at, *r.ended_at, r.end_reason)) + "\n";
  return text;
}

}  // namespace

TEST(Events, CowrieFieldNames) {
  auto r = sample_record();
  auto c = connect_event(r);
  EXPECT_EQ(c["eventid"], "cowrie.session.connect");
  EXPECT_EQ(c["src_ip"], "198.51.100.7");
  auto t = turn_event(r.session_id, r.turns[1]);
  EXPECT_EQ(t["eventid"], "cowrie.command.input");
  EXPECT_EQ(t["input"], "wget http://x");
  EXPECT_FALSE(t.contains("output"));
  EXPECT_EQ(t["failure_cause"]["kind"], "security_policy");
  EXPECT_TRUE(t["impact"].is_null());
  auto cl = close_event(r.session_id, r.started_at, *r.ended_at, "exit");
  EXPECT_DOUBLE_EQ(cl["duration"].get<double>(), 5.0);
}

TEST(Transcript, RoundTripThroughText) {
  auto r = sample_record();
  auto load = parse_transcript_text(events_for(r), true);
  ASSERT_EQ(load.records.size(), 1u);
  EXPECT_EQ(load.records[0], r);
  EXPECT_EQ(load.malformed_lines, 0u);
}

TEST(Transcript, InvalidUtf8IsReplacedNotFatal) {
  auto r = sample_record();
  r.turns[0].query = std::string("echo \xff\xfe");
  auto line = compact_line(turn_event(r.session_id, r.turns[0]));
  EXPECT_FALSE(json::parse(line, nullptr, false).is_discarded());
}

TEST(Transcript, TruncatedTailIsToleratedEvenWhenStrict) {
  auto text = events_for(sample_record());
  text += R"({"eventid":"cowrie.command.input","sess)";
  auto load = parse_transcript_text(text, true);
  EXPECT_EQ(load.truncated_tail, 1u);
  ASSERT_EQ(load.records.size(), 1u);
  EXPECT_EQ(load.records[0].turns.size(), 2u);
}

TEST(Transcript, StrictReportsLineNumber) {
  auto text = events_for(sample_record());
  text.insert(text.find('\n') + 1, "{broken\n");
  try {
    (void)parse_transcript_text(text, true, "t.jsonl");
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("t.jsonl:2:"), std::string::npos) << e.what();
  }
  auto lenient = parse_transcript_text(text, false);
  EXPECT_EQ(lenient.malformed_lines, 1u);
  EXPECT_EQ(lenient.records.size(), 1u);
}

TEST(JsonlSink, PerRunFileIsReadBack) {
  TempDir dir;
  auto file = dir / "run.jsonl";
  auto r = sample_record();
  {
    JsonlSink sink(file, JsonlSink::Rotation::PerRun, false);
    EXPECT_TRUE(sink.open_session(r));
    EXPECT_TRUE(sink.write(login_event(r.session_id, r.started_at, "root", "123456")));
    for (const auto& t : r.turns) EXPECT_TRUE(sink.append_turn(r.session_id, t));
    EXPECT_TRUE(sink.close_session(r.session_id, r.started_at, *r.ended_at, "exit"));
    EXPECT_EQ(sink.files().size(), 1u);
  }
  auto load = load_transcripts({file}, true);
  ASSERT_EQ(load.records.size(), 1u);
  EXPECT_EQ(load.records[0], r);
}

TEST(JsonlSink, PerDayRotationByEventTime) {
  TempDir dir;
  JsonlSink sink(dir.path(), JsonlSink::Rotation::PerDay, false);
  auto r = sample_record();
  sink.open_session(r);
  sink.close_session(r.session_id, r.started_at, r.started_at + std::chrono::hours(24), "eof");
  EXPECT_TRUE(std::filesystem::exists(dir / "transcript-2024-03-01.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "transcript-2024-03-02.jsonl"));
  auto load = load_transcripts(sink.files(), true);
  ASSERT_EQ(load.records.size(), 1u);
  EXPECT_EQ(load.records[0].end_reason, "eof");
}

TEST(JsonlSink, ConcurrentWritersProduceWholeLines) {
  TempDir dir;
  auto file = dir / "c.jsonl";
  {
    JsonlSink sink(file, JsonlSink::Rotation::PerRun, false);
    std::vector<std::thread> ts;
    for (int w = 0; w < 8; ++w) {
      ts.emplace_back([&, w] {
        for (int i = 0; i < 100; ++i) {
          TurnRecord t;
          t.index = i + 1;
          t.query = std::string(200, static_cast<char>('a' + w));
          t.answer = "x";
          t.timestamp = kT0;
          sink.append_turn("s" + std::to_string(w), t);
        }
      });
    }
    for (auto& t : ts) t.join();
  }
  auto load = load_transcripts({file}, true);
  ASSERT_EQ(load.records.size(), 8u);
  for (const auto& r : load.records) EXPECT_EQ(r.turns.size(), 100u);
}

TEST(JsonlSink, UnwritableTargetReturnsFalse) {
  JsonlSink sink("/proc/decoysh-no-such/x.jsonl", JsonlSink::Rotation::PerRun, false);
  EXPECT_FALSE(sink.open_session(sample_record()));
}

TEST(Corpus, JsonRoundTripAndErrors) {
  ReplayCorpus c{{{"s1", {"ls", "id"}}, {"s2", {"uname -a"}}}, "test"};
  EXPECT_EQ(corpus_from_json(to_json(c)), c);
  EXPECT_EQ(c.command_count(), 3u);
  try {
    (void)corpus_from_json(json::parse(R"({"sessions":[{"source_id":"a","commands":[1]}]})"));
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus.sessions[0].commands"), std::string::npos);
  }
  EXPECT_THROW(corpus_from_json(json::parse(R"({"sessions":[{"source_id":"a","commands":[]}]})")), InputError);
  EXPECT_THROW(corpus_from_json(json::parse(R"([])")), InputError);
}

TEST(Corpus, FixtureLoads) {
  auto c = load_corpus(fixture("corpus.json"));
  EXPECT_EQ(c.sessions.size(), 10u);
  EXPECT_EQ(c.command_count(), 25u);
}

TEST(Ingest, CowrieFixtureCounts) {
  auto r = ingest_cowrie_files({fixture("cowrie/cowrie.json.2024-03-01"), fixture("cowrie/cowrie.json")});
  const auto& s = r.summary;
  EXPECT_EQ(s.files, 2u);
  EXPECT_EQ(s.lines, 31u);
  EXPECT_EQ(s.malformed_lines, 1u);
  EXPECT_EQ(s.events, 30u);
  EXPECT_EQ(s.command_events, 12u);
  EXPECT_EQ(s.sessions_seen, 7u);
  EXPECT_EQ(s.sessions_kept, 5u);
  EXPECT_EQ(s.sessions_dropped, 2u);
  EXPECT_EQ(s.commands_kept, 12u);
  ASSERT_EQ(r.corpus.sessions.size(), 5u);

  auto d = dedupe_corpus(r.corpus);
  EXPECT_EQ(d.before, 5u);
  EXPECT_EQ(d.after, 4u);
  EXPECT_EQ(d.removed(), 1u);
  EXPECT_EQ(d.corpus.command_count(), 9u);
  std::vector<std::string> ids;
  for (const auto& cs : d.corpus.sessions) ids.push_back(cs.source_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"a1b2c3d4e5f6", "c3d4e5f6a1b2", "f6a1b2c3d4e5", "0a1b2c3d4e5f"}));
  EXPECT_EQ(d.corpus.sessions[1].commands.front(), "cd /tmp");
  EXPECT_EQ(d.corpus.sessions[2].commands, (std::vector<std::string>{"echo hi", "id", "exit"}));
}

TEST(Ingest, OrdersByMicrosecondTimestampThenFileOrder) {
  std::string log =
      R"({"eventid":"cowrie.command.input","session":"s","timestamp":"2024-01-01T00:00:00.000200Z","input":"b"})"
      "\n"
      R"({"eventid":"cowrie.command.input","session":"s","timestamp":"2024-01-01T00:00:00.000100Z","input":"a"})"
      "\n"
      R"({"eventid":"cowrie.command.input","session":"s","timestamp":"2024-01-01T00:00:00.000200Z","input":"c"})"
      "\n";
  auto r = ingest_cowrie({{"mem", log}});
  ASSERT_EQ(r.corpus.sessions.size(), 1u);
  EXPECT_EQ(r.corpus.sessions[0].commands, (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Dedupe, CustomPolicy) {
  ReplayCorpus c{{{"a", {"ls"}}, {"b", {"LS"}}, {"c", {"id"}}}, ""};
  auto lower = [](const CorpusSession& s) {
    std::string k;
    for (const auto& cmd : s.commands) {
      for (char ch : cmd) k += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      k += '\n';
    }
    return k;
  };
  EXPECT_EQ(dedupe_corpus(c).after, 3u);
  EXPECT_EQ(dedupe_corpus(c, lower).after, 2u);
}
